use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gridcascade::cascade::CascadeConfig;
use gridcascade_model::{LossConfig, Mode, ModelConfig, MultiRoundConfig, TrainConfig, Variant};

pub const DATA_ENV: &str = "GRIDCASCADE_DATA";

#[derive(Debug, Parser)]
#[command(name = "gridcascade", version, about = "Cascading-failure datasets and graph neural jump-ODE predictors")]
pub struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate cascades and write a split, normalized-stat dataset.
    Generate(GenerateArgs),
    /// Train one model variant and calibrate its thresholds.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train every variant under identical seeds and tabulate the differences.
    Ablate(AblateArgs),
    /// Solve the AC power flow of a case and dump the solution.
    PfSolve(PfSolveArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Case JSON; defaults to the bundled 24-bus reliability test system.
    #[arg(long)]
    pub case: Option<PathBuf>,
    /// Number of scenarios.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parallel simulation workers; output is identical for any count.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Output directory.
    #[arg(long, env = DATA_ENV, default_value = "data")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cascade: CascadeArgs,
}

#[derive(Debug, Args)]
pub struct CascadeArgs {
    /// Lower end of the load scaling range.
    #[arg(long, default_value_t = 0.6)]
    pub load_min: f64,
    /// Upper end of the load scaling range.
    #[arg(long, default_value_t = 1.4)]
    pub load_max: f64,
    /// Contingency order distribution as `k:p` pairs.
    #[arg(long, default_value = "1:0.70,2:0.25,3:0.05")]
    pub nk: String,
    /// Loading (% of rating) that trips a branch immediately.
    #[arg(long, default_value_t = 120.0)]
    pub hard_trip: f64,
    /// Loading (% of rating) above which the persistence counter runs.
    #[arg(long, default_value_t = 100.0)]
    pub soft_trip: f64,
    /// Consecutive rounds above the soft limit before a trip.
    #[arg(long, default_value_t = 2)]
    pub persist: usize,
    /// Draw each branch's persistence window from {2, 3}.
    #[arg(long)]
    pub random_persist: bool,
    /// Undervoltage failure level, p.u.
    #[arg(long, default_value_t = 0.8)]
    pub v_fail: f64,
    /// Relay rounds before the simulation stops.
    #[arg(long, default_value_t = 20)]
    pub max_rounds: usize,
    /// Minimum post-outage loading (%) for a contingency to be kept.
    #[arg(long, default_value_t = 94.0)]
    pub screen: f64,
    /// Extra sampling weight for branches at low-degree buses.
    #[arg(long, default_value_t = 2.0)]
    pub leaf_bias: f64,
    /// Demand-not-served fraction marking a scenario unsafe.
    #[arg(long, default_value_t = 0.05)]
    pub severity: f64,
    /// Contingency draws per operating point.
    #[arg(long, default_value_t = 4)]
    pub per_op: usize,
    /// Contingency draws before an operating point is redrawn.
    #[arg(long, default_value_t = 200)]
    pub attempts: usize,
    /// Scale only loads, leaving scheduled generation to the slack bus.
    #[arg(long)]
    pub load_only: bool,
}

impl CascadeArgs {
    pub fn config(&self, seed: u64) -> Result<CascadeConfig, String> {
        let mut nk = BTreeMap::new();
        for part in self.nk.split(',') {
            let (k, p) = part.split_once(':').ok_or_else(|| format!("bad --nk entry `{part}`"))?;
            let k: usize = k.trim().parse().map_err(|_| format!("bad order in `{part}`"))?;
            let p: f64 = p.trim().parse().map_err(|_| format!("bad probability in `{part}`"))?;
            nk.insert(k, p);
        }
        Ok(CascadeConfig {
            load_scale_range: [self.load_min, self.load_max],
            nk_distribution: nk,
            hard_trip_pct: self.hard_trip,
            soft_trip_low_pct: self.soft_trip,
            soft_trip_persist_rounds: self.persist,
            soft_trip_random_persist: self.random_persist,
            v_fail_pu: self.v_fail,
            max_rounds: self.max_rounds,
            screen_min_loading_pct: self.screen,
            leaf_bias_weight: self.leaf_bias,
            severity_threshold: self.severity,
            rng_seed: seed,
            max_contingency_attempts: self.attempts,
            scenarios_per_operating_point: self.per_op,
            scale_dispatch_with_load: !self.load_only,
        })
    }
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    /// Hidden dimension d.
    #[arg(long, default_value_t = 64)]
    pub hidden_dim: usize,
    /// Encoder attention layers L.
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    /// Attention heads K.
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// ODE horizon T (one Euler step).
    #[arg(long, default_value_t = 1.0)]
    pub ode_time: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Initial jump scale.
    #[arg(long, default_value_t = 0.1)]
    pub gamma_init: f64,
    /// Trip probability above which the jump and the rollout gate fire.
    #[arg(long, default_value_t = 0.5)]
    pub trip_threshold: f64,
    /// Maximum rollout rounds R (multi-round mode).
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    /// Round discount factor.
    #[arg(long, default_value_t = 0.95)]
    pub beta: f64,
}

impl ModelArgs {
    pub fn config(&self, variant: Variant, mode: Mode) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            heads: self.heads,
            ode_time: self.ode_time,
            dropout: self.dropout,
            gamma_init: self.gamma_init,
            trip_threshold: self.trip_threshold,
            variant,
            multi_round: (mode == Mode::MultiRound).then_some(MultiRoundConfig { rounds: self.rounds, beta: self.beta }),
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct OptimArgs {
    /// Peak learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    /// Early-stopping patience [default: 15 one-shot, 30 multi-round].
    #[arg(long)]
    pub patience: Option<usize>,
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    /// Fraction of steps spent warming the learning rate up.
    #[arg(long, default_value_t = 0.1)]
    pub warmup_frac: f64,
    /// Initial learning rate is lr / div-factor.
    #[arg(long, default_value_t = 25.0)]
    pub div_factor: f64,
    /// Final learning rate is lr / final-div-factor.
    #[arg(long, default_value_t = 1e4)]
    pub final_div_factor: f64,
    /// Epochs over which teacher forcing decays to zero.
    #[arg(long, default_value_t = 60)]
    pub tss: usize,
    /// Lower bound on the teacher-forcing ratio.
    #[arg(long, default_value_t = 0.0)]
    pub tf_floor: f64,
}

impl OptimArgs {
    pub fn config(&self, mode: Mode, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience.unwrap_or(if mode == Mode::MultiRound { 30 } else { 15 }),
            clip_norm: self.clip_norm,
            warmup_frac: self.warmup_frac,
            div_factor: self.div_factor,
            final_div_factor: self.final_div_factor,
            t_ss: self.tss,
            tf_floor: self.tf_floor,
            mode,
            seed,
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct LossArgs {
    #[arg(long, default_value_t = 1.0)]
    pub lambda_node: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_edge: f64,
    #[arg(long, default_value_t = 0.3)]
    pub lambda_sev: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_dns: f64,
    /// Physics weight reached after warm-up.
    #[arg(long, default_value_t = 0.15)]
    pub lambda_phys: f64,
    /// Epochs of linear physics warm-up.
    #[arg(long, default_value_t = 30)]
    pub phys_warmup: usize,
    #[arg(long, default_value_t = 100.0)]
    pub edge_pos_cap: f64,
    #[arg(long, default_value_t = 30.0)]
    pub node_pos_cap: f64,
    /// Weigh severity classes equally instead of by square-root inverse frequency.
    #[arg(long)]
    pub flat_severity: bool,
}

impl LossArgs {
    pub fn config(&self) -> LossConfig {
        LossConfig {
            lambda_node: self.lambda_node,
            lambda_edge: self.lambda_edge,
            lambda_sev: self.lambda_sev,
            lambda_dns: self.lambda_dns,
            lambda_phys_target: self.lambda_phys,
            warmup_epochs: self.phys_warmup,
            edge_pos_weight_cap: self.edge_pos_cap,
            node_pos_weight_cap: self.node_pos_cap,
            sqrt_inverse_severity: !self.flat_severity,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long, env = DATA_ENV, default_value = "data")]
    pub data: PathBuf,
    /// Output directory [default: <data>/runs/<variant>-<mode>-seed<seed>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    pub variant: Variant,
    #[arg(long, default_value = "one-shot")]
    pub mode: Mode,
    /// Seed for initialization, shuffling, dropout and scheduled sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Threads for batch evaluation.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub loss: LossArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = DATA_ENV, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "one-shot")]
    pub mode: Mode,
    /// Split to score: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Add a round-by-round breakdown (multi-round mode).
    #[arg(long)]
    pub per_round: bool,
    /// Directory for eval.json, eval.csv and per_round.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, env = DATA_ENV, default_value = "data")]
    pub data: PathBuf,
    /// Output directory [default: <data>/ablation].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated training seeds; every variant runs once per seed.
    #[arg(long, default_value = "0", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Comma-separated variants [default: all six].
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    #[arg(long, default_value = "one-shot")]
    pub mode: Mode,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub loss: LossArgs,
}

#[derive(Debug, Args)]
pub struct PfSolveArgs {
    #[arg(long)]
    pub case: Option<PathBuf>,
    /// Uniform load scaling applied before solving.
    #[arg(long, default_value_t = 1.0)]
    pub load_scale: f64,
    /// Comma-separated branch indices taken out of service.
    #[arg(long, value_delimiter = ',')]
    pub outage: Vec<usize>,
    /// Print the full solution as JSON instead of tables.
    #[arg(long)]
    pub json: bool,
}
