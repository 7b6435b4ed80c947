use std::fmt::Write as _;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use fedridge::bench::{self, BenchConfig};
use fedridge::experiment::{client_bundle, run_stream};
use fedridge::federation::{self, Coordinator, ParticipationError};
use fedridge::io::{read_bundle, read_plan, write_bundle, write_model, write_plan};
use fedridge::metrics::{accuracy, grid_table, metrics_table};
use fedridge::partition::{build_stream, LabeledPool, StreamPlan};
use fedridge::synth::{gaussian_blobs, FederationShape};
use fedridge::verify::{self, VerifyConfig};
use fedridge::{FeatureBundle, GlobalModel, ServerState};

use crate::config::{Mode, RunConfig};

/// Wraps a library error so its exit code survives `anyhow`.
fn core<E: Into<fedridge::Error>>(e: E) -> anyhow::Error {
    anyhow::Error::new(e.into())
}

fn required<'a>(path: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| anyhow!("missing paths.{name}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes to stdout. A reader that went away (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

macro_rules! say {
    ($($arg:tt)*) => { emit(&format!("{}\n", format_args!($($arg)*))) };
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub struct SynthArgs {
    pub output: PathBuf,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub width: usize,
    pub scale: f64,
    pub noise: f64,
    pub seed: u64,
}

/// Writes `train.afcb` and `test.afcb` holding Gaussian blobs.
pub fn synth(args: &SynthArgs) -> Result<()> {
    if args.width < args.classes {
        bail!("width {} must be at least the class count {}", args.width, args.classes);
    }
    create_dir(&args.output)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for (name, per_class) in [("train", args.per_class), ("test", args.test_per_class)] {
        let b = gaussian_blobs(name, args.classes, per_class, args.width, args.scale, args.noise, &mut rng);
        let path = args.output.join(format!("{name}.afcb"));
        write_bundle(&b, &path).map_err(core)?;
        say!("wrote {} ({} samples, width {})", path.display(), b.samples(), b.embedding_width())?;
    }
    Ok(())
}

pub fn partition(config: &RunConfig) -> Result<()> {
    let train = read_bundle(required(&config.paths.train, "train")?).map_err(core)?;
    let out = required(&config.paths.output, "output")?;
    let plan = build_stream(&LabeledPool::from_labels(&train.labels), &config.plan_params()).map_err(core)?;
    write_plan(&plan, out).map_err(core)?;
    emit(&render_plan(&plan))?;
    say!("wrote {}", out.display())?;
    Ok(())
}

fn render_plan(plan: &StreamPlan) -> String {
    let mut out = String::new();
    for (t, classes) in plan.task_classes().iter().enumerate() {
        let ids: Vec<String> = classes.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "task {t}: {} classes [{}]", classes.len(), ids.join(" "));
    }
    for (vc, hist) in plan.clients.iter().zip(plan.histograms()) {
        let bins: Vec<String> = hist.iter().map(|(c, n)| format!("{c}:{n}")).collect();
        let _ = writeln!(out, "{:<8} {:>6} samples  {}", vc.tag(), vc.samples.len(), bins.join(" "));
    }
    let _ = writeln!(out, "mean client label entropy {:.4} nats", plan.mean_label_entropy());
    out
}

#[derive(Serialize)]
struct Summary {
    gamma: f64,
    seed: u64,
    tasks: usize,
    clients_run: usize,
    skipped: Vec<String>,
    classes: usize,
    final_average_accuracy: f64,
    peak_server_values: usize,
}

pub fn run(config: &RunConfig) -> Result<()> {
    config.validate()?;
    match config.mode {
        Mode::InProcess => run_in_process(config),
        Mode::Serve => serve(config),
        Mode::Join => join(config),
    }
}

fn run_in_process(config: &RunConfig) -> Result<()> {
    let train = read_bundle(required(&config.paths.train, "train")?).map_err(core)?;
    let test = read_bundle(required(&config.paths.test, "test")?).map_err(core)?;
    let plan = read_plan(required(&config.paths.plan, "plan")?).map_err(core)?;
    let out = required(&config.paths.output, "output")?;

    let outcome = run_stream(&train, &test, &plan, &config.run_options()).map_err(core)?;
    let tasks = plan.params.tasks;
    let final_average = fedridge::metrics::average_accuracy(&outcome.grid, tasks).map_err(core)?;

    create_dir(out)?;
    write_model(&outcome.model, &out.join("model.afcm")).map_err(core)?;
    write_text(&out.join("grid.csv"), &grid_table(&outcome.grid))?;
    if !outcome.metrics.is_empty() {
        let table = metrics_table(&outcome.metrics);
        write_text(&out.join("metrics.csv"), &table)?;
        emit(&table)?;
    }
    let summary = Summary {
        gamma: config.gamma,
        seed: plan.params.seed,
        tasks,
        clients_run: outcome.clients_run,
        skipped: outcome.skipped,
        classes: outcome.model.column_classes.len(),
        final_average_accuracy: final_average,
        peak_server_values: outcome.peak_server_values,
    };
    write_text(&out.join("summary.toml"), &toml::to_string(&summary)?)?;
    say!(
        "{} clients over {tasks} tasks, {} classes, final average accuracy {final_average:.4}",
        summary.clients_run,
        summary.classes
    )?;
    say!("wrote {}", out.display())?;
    Ok(())
}

fn non_empty_clients(plan: &StreamPlan) -> u64 {
    plan.clients.iter().filter(|vc| !vc.samples.is_empty()).count() as u64
}

fn serve(config: &RunConfig) -> Result<()> {
    let train = config.paths.train.as_deref().map(read_bundle).transpose().map_err(core)?;
    let width = match (config.network.width, &train) {
        (Some(w), _) => w,
        (None, Some(b)) => b.embedding_width(),
        (None, None) => bail!("embedding width unknown"),
    };
    let expected = match config.network.expected {
        Some(n) => n,
        None => non_empty_clients(&read_plan(required(&config.paths.plan, "plan")?).map_err(core)?),
    };
    let out = required(&config.paths.output, "output")?;

    let state = ServerState::new(width, config.gamma).map_err(core)?;
    let listener = TcpListener::bind(config.socket()?).with_context(|| format!("binding {}", config.network.address))?;
    say!("listening on {} for {expected} clients", listener.local_addr()?)?;

    let coord = federation::serve(listener, Coordinator::new(state, config.aggregation_mode()), expected).map_err(core)?;
    if let Some((round, e)) = coord.failure() {
        log::error!("aggregation failed at round {round}");
        return Err(core(e.clone()));
    }
    let model = coord.finalize().map_err(core)?;
    create_dir(out)?;
    write_model(&model, &out.join("model.afcm")).map_err(core)?;
    say!("aggregated {} clients, {} classes", model.round, model.column_classes.len())?;
    if let Some(path) = &config.paths.test {
        report_accuracy(&model, &read_bundle(path).map_err(core)?)?;
    }
    say!("wrote {}", out.display())?;
    Ok(())
}

fn report_accuracy(model: &GlobalModel, test: &FeatureBundle) -> Result<()> {
    let acc = accuracy(model, &test.features, &test.labels).map_err(core)?;
    say!("test accuracy {acc:.4} on {} samples", test.samples())?;
    Ok(())
}

fn join(config: &RunConfig) -> Result<()> {
    let train = read_bundle(required(&config.paths.train, "train")?).map_err(core)?;
    let bundles: Vec<FeatureBundle> = match &config.paths.plan {
        None => vec![train],
        Some(path) => {
            let plan = read_plan(path).map_err(core)?;
            let chosen: Vec<_> = plan
                .clients
                .iter()
                .filter(|vc| config.network.client.as_ref().is_none_or(|t| *t == vc.tag()))
                .collect();
            if chosen.is_empty() {
                bail!("no plan client is tagged {:?}", config.network.client.as_deref().unwrap_or(""));
            }
            chosen
                .into_iter()
                .filter(|vc| {
                    let empty = vc.samples.is_empty();
                    if empty {
                        log::warn!("skipping {}: no samples", vc.tag());
                    }
                    !empty
                })
                .map(|vc| client_bundle(&train, vc))
                .collect()
        }
    };
    let addr = config.socket()?;
    for b in &bundles {
        let status = federation::join(addr, b, config.network.attempts).map_err(core)?;
        say!("{}: {status:?}", b.client_tag)?;
        if !status.is_success() {
            return Err(core(ParticipationError::Refused(status)));
        }
    }
    Ok(())
}

pub struct VerifyArgs {
    pub clients: usize,
    pub width: usize,
    pub classes: usize,
    pub min_samples: usize,
    pub max_samples: usize,
    pub permutations: usize,
    pub regroupings: usize,
    pub corrupt: bool,
}

/// Returns whether every check passed.
pub fn verify(config: &RunConfig, args: &VerifyArgs) -> Result<bool> {
    if args.clients == 0 || args.width == 0 || args.classes == 0 || args.min_samples == 0 {
        bail!("clients, width, classes and min-samples must all be at least 1");
    }
    if args.min_samples > args.max_samples {
        bail!("min-samples {} exceeds max-samples {}", args.min_samples, args.max_samples);
    }
    if config.gamma == 0.0 && args.min_samples < args.width {
        bail!("gamma = 0 needs every client to hold at least width = {} samples", args.width);
    }
    let report = verify::run(&VerifyConfig {
        shape: FederationShape {
            clients: args.clients,
            width: args.width,
            classes: args.classes,
            samples: (args.min_samples, args.max_samples),
        },
        gamma: config.gamma,
        seed: config.seed,
        permutations: args.permutations,
        regroupings: args.regroupings,
        corrupt: args.corrupt,
    })
    .map_err(core)?;
    emit(&report.render())?;
    Ok(report.passed())
}

pub fn bench(config: &RunConfig, widths: Vec<usize>, samples: Vec<usize>, classes: usize, repeats: usize) -> Result<()> {
    if widths.len() < 2 || samples.len() < 2 {
        bail!("fitting exponents needs at least two widths and two sample counts");
    }
    let report = bench::run(&BenchConfig { widths, samples, classes, repeats, gamma: config.gamma, seed: config.seed })
        .map_err(core)?;
    emit(&report.render())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedridge::partition::PlanParams;
    use fedridge::ClassId;

    #[test]
    fn plan_rendering_lists_tasks_and_clients() {
        let labels: Vec<ClassId> = (0..40).map(|i| ClassId(i % 4)).collect();
        let params = PlanParams { tasks: 2, clients_per_task: 2, seed: 3, ..PlanParams::default() };
        let plan = build_stream(&LabeledPool::from_labels(&labels), &params).unwrap();
        let text = render_plan(&plan);
        assert!(text.starts_with("task 0:"));
        assert!(text.contains("t1-c1"));
        assert!(text.contains("entropy"));
    }

    #[test]
    fn library_errors_keep_their_exit_code() {
        let e = core(fedridge::io::ProtocolError::Closed).context("joining");
        assert_eq!(e.downcast_ref::<fedridge::Error>().unwrap().exit_code(), fedridge::exit::PROTOCOL);
    }
}
