use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vatlab::config::{self, RunConfig};
use vatlab::experiments;
use vatlab::formats::export;
use vatlab::records::write_json;
use vatlab::{Result, VatlabError};

const OUTPUTS: &str = "\
Outputs (all under --out):
  config.resolved   every effective key, `key = value`; pass it back with --config to rerun
  metrics.ndjson    one object per kept update: update, nll, r_vadv, r_cent, total,
                    backprops, lr, and at checkpoints val_error, test_error (sd_norm_k0,
                    sd_norm_k1 for sdnorm)
  timing.csv        update,wallclock (seconds since start)
  model.vatm        checkpoint: \"VATM\", version 1, spec, little-endian f64 parameters
  summary.json      task, method, seed, updates, eps, K, final_nll, final_total,
                    final_val_error, final_test_error, mean_r_vadv_last10,
                    backprops_per_update, total_backprops
  sweep.csv         eps,val_error,r_vadv_final (one run per eps in eps_<i>/)
  sdnorm.csv        update,K,sd_norm
  heatmap.csv       x,y,lds (row-major, y outer); heatmap.json: nx, ny, eps, K, min, max, mean, argmax
  oracle_report.json  rank_one, random_mlp, gradient_rel_error, pass, failures
  eval.json         task, val_error, test_error, eps, r_vadv_k0, r_vadv_k1
  data.csv          x0,x1,label of the labeled and unlabeled synth2d points (train only)

Exit codes: 0 ok, 1 config error, 2 data error (including a missing checkpoint),
3 numeric failure, 4 oracle invariant failure.

Environment: VATLAB_DATA_DIR points at a directory holding train-images-idx3-ubyte,
train-labels-idx1-ubyte, t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte (optionally .gz).
Without it the mnist task uses the bundled 10,000-digit subset.";

#[derive(Parser)]
#[command(name = "vatlab", version, about = "Virtual adversarial training experiments", after_long_help = OUTPUTS)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model.
    Train(Common),
    /// Train once per ε and tabulate validation error.
    SweepEps {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ε values (sweep.eps).
        #[arg(long)]
        eps_list: Option<String>,
        /// Run the ε values on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Compare the power iteration and gradients against brute-force oracles.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Start directions per comparison (oracle.trials).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// LDS over a grid for a saved 2-D model.
    Heatmap {
        #[command(flatten)]
        common: Common,
        /// Model file; defaults to <out>/model.vatm.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Normalized SD norm of the K=0 and K=1 regularizer gradients during training.
    Sdnorm {
        #[command(flatten)]
        common: Common,
        /// Gradient samples per estimate (sdnorm.num_samples).
        #[arg(long)]
        num_samples: Option<usize>,
    },
    /// Errors and R_vadv probes of a saved model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model file; defaults to <out>/model.vatm.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any config key, repeatable: --set perturb.xi=1e-6.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// synth2d or mnist.
    #[arg(long)]
    task: Option<String>,
    /// baseline, vat, rpt, adversarial_l2, adversarial_linf, vat_entmin.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Perturbation radius ε.
    #[arg(long)]
    eps: Option<f64>,
    /// Power iterations K.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    hidden: Option<String>,
    /// Hidden-layer Gaussian noise sd.
    #[arg(long)]
    noise_sd: Option<f64>,
}

impl Common {
    fn resolve(&self, extra: Vec<(String, String)>) -> Result<RunConfig> {
        self.resolve_from(extra, false)
    }

    /// With `inherit`, a `config.resolved` already in the output directory
    /// stands in for a missing `--config`, so a model is inspected with the
    /// settings it was trained with.
    fn resolve_from(&self, extra: Vec<(String, String)>, inherit: bool) -> Result<RunConfig> {
        let inherited = self.out.as_ref().map(|o| o.join("config.resolved")).filter(|p| inherit && p.is_file());
        let file = match self.config.as_ref().or(inherited.as_ref()) {
            Some(p) => config::read_file(p)?,
            None => Vec::new(),
        };
        let mut flags = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                flags.push((k.to_string(), v));
            }
        };
        put("task", self.task.clone());
        put("method", self.method.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("perturb.eps", self.eps.map(|v| format!("{:?}", v)));
        put("perturb.k", self.k.map(|v| v.to_string()));
        put("perturb.xi", self.xi.map(|v| format!("{:?}", v)));
        put("objective.alpha", self.alpha.map(|v| format!("{:?}", v)));
        put("objective.beta", self.beta.map(|v| format!("{:?}", v)));
        put("updates", self.updates.map(|v| v.to_string()));
        put("train.lr", self.lr.map(|v| format!("{:?}", v)));
        put("model.hidden", self.hidden.clone());
        put("model.noise_sd", self.noise_sd.map(|v| format!("{:?}", v)));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        for s in &self.set {
            flags.push(config::parse_assignment(s)?);
        }
        flags.extend(extra);
        RunConfig::resolve(&[file, flags])
    }
}

fn opt(key: &str, v: Option<String>) -> Vec<(String, String)> {
    v.map(|v| vec![(key.to_string(), v)]).unwrap_or_default()
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(c) => {
            let cfg = c.resolve(Vec::new())?;
            let data = experiments::load_task(&cfg)?;
            let r = experiments::run_train(&cfg, &data, Some(&cfg.out))?;
            if data.input_dim == 2 {
                let all = data.labeled.concat(&data.unlabeled, "data")?;
                export::write_text(&cfg.out.join("data.csv"), &export::dataset_csv(&all))?;
            }
            println!("{}", serde_json::to_string_pretty(&r.summary.to_json()).unwrap_or_default());
        }
        Cmd::SweepEps { common, eps_list, parallel } => {
            let cfg = common.resolve(opt("sweep.eps", eps_list))?;
            let data = experiments::load_task(&cfg)?;
            let rows = experiments::sweep_eps(&cfg, &data, Some(&cfg.out), parallel)?;
            print!("{}", export::sweep_csv(&rows));
        }
        Cmd::OracleCheck { common, trials } => {
            let cfg = common.resolve(opt("oracle.trials", trials.map(|t| t.to_string())))?;
            std::fs::create_dir_all(&cfg.out).map_err(VatlabError::io(&cfg.out))?;
            cfg.write_resolved(&cfg.out)?;
            let check = experiments::oracle_check(&cfg)?;
            write_json(&cfg.out.join("oracle_report.json"), &check.report)?;
            println!("{}", serde_json::to_string_pretty(&check.report).unwrap_or_default());
            if !check.failures.is_empty() {
                return Err(VatlabError::Invariant(check.failures.join("; ")));
            }
        }
        Cmd::Heatmap { common, checkpoint } => {
            let cfg = common.resolve_from(Vec::new(), true)?;
            let model = experiments::load_checkpoint(&checkpoint.unwrap_or_else(|| cfg.out.join("model.vatm")))?;
            let (_, stats) = experiments::heatmap(&cfg, &model, Some(&cfg.out))?;
            println!("{}", serde_json::to_string_pretty(&stats).unwrap_or_default());
        }
        Cmd::Sdnorm { common, num_samples } => {
            let cfg = common.resolve(opt("sdnorm.num_samples", num_samples.map(|n| n.to_string())))?;
            if cfg.sdnorm_samples < 8 {
                eprintln!("note: {} gradient samples per estimate; expect wide confidence intervals", cfg.sdnorm_samples);
            }
            let data = experiments::load_task(&cfg)?;
            let rows = experiments::sdnorm_series(&cfg, &data, Some(&cfg.out))?;
            print!("{}", export::sdnorm_csv(&rows));
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = common.resolve_from(Vec::new(), true)?;
            let model = experiments::load_checkpoint(&checkpoint.unwrap_or_else(|| cfg.out.join("model.vatm")))?;
            let data = experiments::load_task(&cfg)?;
            let v = experiments::eval(&cfg, &model, &data)?;
            std::fs::create_dir_all(&cfg.out).map_err(VatlabError::io(&cfg.out))?;
            write_json(&cfg.out.join("eval.json"), &v)?;
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
