//! Implementations of the CLI subcommands. Every command is a pure function
//! of its flags, input files, and seeds; file outputs are canonicalized
//! before writing so reruns are byte-identical.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use lhd::asha::{candidate_key, hash01, ladder, run_asha, SurrogateEvaluator};
use lhd::capacity::{count_stats, scale_to_1m};
use lhd::complexity::{continuous_complexity, summarize, valid_complexity};
use lhd::discretize::random_genotype;
use lhd::metrics::{edf, rank_report, read_results_csv, RESULTS_HEADER};
use lhd::space::{stack_plan, Finalnet, PolicyId, SpaceFamily, SpaceSpec};
use lhd::toysearch::{benchmark_finalnet, draw_seeds, run_trial, Method, SearchConfig};
use lhd::{LhdError, Result};

use crate::manifest::{digest_bytes, RunManifest};

/// Formats a float with six significant digits, the fixed precision of
/// every CSV the tool writes.
pub fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0.00000".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

fn space_for_policy(policy: PolicyId) -> SpaceSpec {
    match policy {
        PolicyId::Original => SpaceSpec::dss(),
        _ => SpaceSpec::lhd(),
    }
}

fn results_header_line() -> String {
    let mut line = RESULTS_HEADER.join(",");
    line.push('\n');
    line
}

fn run_parallel<T, U>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
{
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| LhdError::SearchFailure(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(|item| f(item)).collect())
}

/// Prints a payload to stdout or writes it to a file, recording digests in
/// the manifest. The manifest itself lands at `manifest_path` when given,
/// else next to the output file, else nowhere.
fn emit(
    payload: &str,
    output: Option<&Path>,
    manifest: &mut RunManifest,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let default_manifest = match output {
        Some(path) => {
            fs::write(path, payload)?;
            manifest.output(path)?;
            let mut sidecar = path.as_os_str().to_owned();
            sidecar.push(".manifest.json");
            Some(PathBuf::from(sidecar))
        }
        None => {
            print!("{payload}");
            manifest
                .outputs
                .insert("stdout".to_string(), digest_bytes(payload.as_bytes()));
            None
        }
    };
    if let Some(path) = manifest_path.map(Path::to_path_buf).or(default_manifest) {
        manifest.write(&path)?;
    }
    Ok(())
}

pub fn space_stats(
    space: SpaceFamily,
    policy: PolicyId,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let spec = match space {
        SpaceFamily::Lhd => SpaceSpec::lhd(),
        SpaceFamily::Dss => SpaceSpec::dss(),
    };
    let continuous = continuous_complexity(&spec)?;
    let valid = valid_complexity(&spec, policy)?;
    let payload = serde_json::to_string_pretty(&json!({
        "space": space.to_string(),
        "n_intermediate": spec.n_intermediate,
        "n_ops": spec.n_ops,
        "policy": policy.to_string(),
        "continuous": {
            "exact": continuous.to_string(),
            "summary": summarize(&continuous),
        },
        "valid": {
            "exact": valid.to_string(),
            "summary": summarize(&valid),
        },
    }))? + "\n";
    let mut manifest = RunManifest::new("space-stats");
    manifest.flag("space", space.to_string());
    manifest.flag("policy", policy.to_string());
    emit(&payload, None, &mut manifest, manifest_path)
}

pub fn sample(
    policy: PolicyId,
    seed: u64,
    count: usize,
    out_dir: &Path,
    jobs: usize,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let spec = space_for_policy(policy);
    let mut stream = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds: Vec<u64> = Vec::with_capacity(count);
    while seeds.len() < count {
        let s = stream.random::<u64>();
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    let nets = run_parallel(jobs, &seeds, |&s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut finalnet = random_genotype(&spec, policy, &mut rng)?;
        finalnet.seed = Some(s);
        Ok(finalnet)
    })?;

    fs::create_dir_all(out_dir)?;
    let mut manifest = RunManifest::new("sample");
    manifest.flag("policy", policy.to_string());
    manifest.flag("seed", seed);
    manifest.flag("count", count as u64);
    manifest.flag("jobs", jobs as u64);
    manifest.seeds = seeds.clone();
    for (s, finalnet) in seeds.iter().zip(&nets) {
        let path = out_dir.join(format!("{policy}_s{s}.json"));
        fs::write(&path, finalnet.to_json() + "\n")?;
        manifest.output(&path)?;
    }
    manifest.write(&manifest_path.map(Path::to_path_buf).unwrap_or(out_dir.join("manifest.json")))
}

#[allow(clippy::too_many_arguments)]
pub fn search(
    method: Method,
    policy: PolicyId,
    task: &str,
    trials: usize,
    seed_stream: u64,
    results: &Path,
    out_dir: &Path,
    jobs: usize,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let cfg = SearchConfig::toy(method);
    let seeds = draw_seeds(trials, seed_stream);
    let outcomes = run_parallel(jobs, &seeds, |&seed| run_trial(method, policy, seed, &cfg))?;

    let mut rows = String::new();
    for r in &outcomes {
        rows.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method.name(),
            task,
            r.policy,
            r.seed,
            sig6(r.val_acc),
            sig6(r.train_acc),
            r.params,
            r.depth
        ));
    }
    let fresh = !results.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(results)?;
    if fresh {
        file.write_all(results_header_line().as_bytes())?;
    }
    file.write_all(rows.as_bytes())?;
    drop(file);

    fs::create_dir_all(out_dir)?;
    let mut manifest = RunManifest::new("search");
    manifest.flag("method", method.name());
    manifest.flag("policy", policy.to_string());
    manifest.flag("task", task);
    manifest.flag("trials", trials as u64);
    manifest.flag("seed_stream", seed_stream);
    manifest.flag("jobs", jobs as u64);
    manifest.seeds = seeds;
    for r in &outcomes {
        if let Some(finalnet) = &r.finalnet {
            let path = out_dir.join(format!("{}_{}_s{}.json", r.method.name(), r.policy, r.seed));
            fs::write(&path, finalnet.to_json() + "\n")?;
            manifest.output(&path)?;
        }
    }
    manifest.output(results)?;
    manifest.write(&manifest_path.map(Path::to_path_buf).unwrap_or(out_dir.join("manifest.json")))
}

pub fn rank(
    input: &Path,
    n_per_method: usize,
    output: Option<&Path>,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let tables = read_results_csv(fs::File::open(input)?)?;
    let report = rank_report(&tables, n_per_method)?;
    let payload = serde_json::to_string_pretty(&report)? + "\n";
    let mut manifest = RunManifest::new("rank");
    manifest.flag("input", input.display().to_string());
    manifest.flag("n_per_method", n_per_method as u64);
    manifest.input(input)?;
    emit(&payload, output, &mut manifest, manifest_path)
}

pub fn edf_command(
    input: &Path,
    condition: Option<&str>,
    method: Option<&str>,
    output: Option<&Path>,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let tables = read_results_csv(fs::File::open(input)?)?;
    let mut samples = Vec::new();
    for table in &tables {
        if condition.is_some_and(|c| c != table.condition) {
            continue;
        }
        for (name, trials) in &table.methods {
            if method.is_some_and(|m| m != name) {
                continue;
            }
            samples.extend(trials.iter().map(|t| t.val_acc));
        }
    }
    let steps = edf(&samples)?;
    let mut payload = String::from("val_acc,fraction\n");
    for (value, fraction) in steps {
        payload.push_str(&format!("{},{}\n", sig6(value), sig6(fraction)));
    }
    let mut manifest = RunManifest::new("edf");
    manifest.flag("input", input.display().to_string());
    manifest.flag("condition", condition.unwrap_or("all"));
    manifest.flag("method", method.unwrap_or("all"));
    manifest.input(input)?;
    emit(&payload, output, &mut manifest, manifest_path)
}

#[allow(clippy::too_many_arguments)]
pub fn asha(
    policy: PolicyId,
    budget_epochs: u64,
    seed: u64,
    candidates: usize,
    eta: u64,
    min_epochs: u64,
    max_epochs: u64,
    noise_scale: f64,
    out_dir: &Path,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let spec = space_for_policy(policy);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<(String, u64, f64)> = Vec::with_capacity(candidates);
    for _ in 0..candidates {
        let s = rng.random::<u64>();
        let mut sample_rng = ChaCha8Rng::seed_from_u64(s);
        let mut finalnet = random_genotype(&spec, policy, &mut sample_rng)?;
        finalnet.seed = Some(s);
        let text = finalnet.to_json() + "\n";
        let key = candidate_key(text.as_bytes());
        pool.push((text, key, hash01(key)));
    }

    let lad = ladder(min_epochs, eta, max_epochs)?;
    let surrogate = SurrogateEvaluator {
        max_resource: *lad.rungs.last().unwrap(),
        noise_scale,
    };
    let mut next = 0usize;
    let outcome = run_asha(
        &lad,
        |_rng: &mut ChaCha8Rng| {
            if next < pool.len() {
                next += 1;
                Some(next - 1)
            } else {
                None
            }
        },
        |&i: &usize, resource| surrogate.score(pool[i].2, pool[i].1, resource),
        budget_epochs,
        &mut rng,
    )?;

    fs::create_dir_all(out_dir)?;
    let best = outcome.best_candidate();
    let best_path = out_dir.join("best_genotype.json");
    fs::write(&best_path, &pool[best.item].0)?;

    let mut trace = String::from("candidate,rung,resource,score\n");
    for event in &outcome.trace {
        trace.push_str(&format!(
            "{},{},{},{}\n",
            event.candidate,
            event.rung,
            event.resource,
            sig6(event.score)
        ));
    }
    let trace_path = out_dir.join("trace.csv");
    fs::write(&trace_path, &trace)?;

    let summary = serde_json::to_string_pretty(&json!({
        "rungs": lad.rungs,
        "rung_counts": outcome.rung_counts(lad.rungs.len()),
        "epochs_used": outcome.epochs_used,
        "candidates_drawn": outcome.candidates.len(),
        "best_candidate": best.id,
        "best_rung": best.rung,
        "best_quality": pool[best.item].2,
    }))? + "\n";
    let summary_path = out_dir.join("summary.json");
    fs::write(&summary_path, &summary)?;

    let mut manifest = RunManifest::new("asha");
    manifest.flag("policy", policy.to_string());
    manifest.flag("budget_epochs", budget_epochs);
    manifest.flag("seed", seed);
    manifest.flag("candidates", candidates as u64);
    manifest.flag("eta", eta);
    manifest.flag("min_epochs", min_epochs);
    manifest.flag("max_epochs", max_epochs);
    manifest.flag("noise_scale", noise_scale);
    manifest.seeds = vec![seed];
    manifest.output(&best_path)?;
    manifest.output(&trace_path)?;
    manifest.output(&summary_path)?;
    manifest.write(&manifest_path.map(Path::to_path_buf).unwrap_or(out_dir.join("manifest.json")))
}

pub fn capacity(
    genotype: &Path,
    cells: usize,
    init_channels: usize,
    rescale_1m: bool,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let text = fs::read_to_string(genotype)?;
    let mut finalnet = Finalnet::from_json(&text)?;
    if finalnet.cells.len() == 1 {
        finalnet = benchmark_finalnet(&finalnet)?;
    }
    let plan = if rescale_1m || finalnet.policy == PolicyId::OneM {
        scale_to_1m(&finalnet)?
    } else {
        stack_plan(cells, init_channels)?
    };
    let stats = count_stats(&finalnet, &plan)?;
    let payload = serde_json::to_string_pretty(&json!({
        "policy": finalnet.policy.to_string(),
        "plan": plan,
        "stats": stats,
    }))? + "\n";
    let mut manifest = RunManifest::new("capacity");
    manifest.flag("genotype", genotype.display().to_string());
    manifest.flag("cells", cells as u64);
    manifest.flag("init_channels", init_channels as u64);
    manifest.flag("rescale_1m", rescale_1m);
    manifest.input(genotype)?;
    emit(&payload, None, &mut manifest, manifest_path)
}
