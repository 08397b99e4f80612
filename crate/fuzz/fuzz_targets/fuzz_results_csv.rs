#![no_main]

use libfuzzer_sys::fuzz_target;

use lhd::metrics::{edf, rank_report, read_results_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(tables) = read_results_csv(data) else {
        return;
    };
    for table in &tables {
        table.validate().expect("returned tables are validated");
    }
    let _ = rank_report(&tables, 5);
    let accs: Vec<f64> = tables
        .iter()
        .flat_map(|t| t.methods.values().flatten())
        .map(|t| t.val_acc)
        .collect();
    let _ = edf(&accs);
});
