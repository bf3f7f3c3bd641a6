use serde::{Deserialize, Serialize};

/// Which stages of the model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoPhysics,
    NoJump,
    NoOde,
    GnnOnly,
    MlpBaseline,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::NoPhysics, Variant::NoJump, Variant::NoOde, Variant::GnnOnly, Variant::MlpBaseline];

    pub fn uses_ode(self) -> bool {
        matches!(self, Variant::Full | Variant::NoPhysics | Variant::NoJump)
    }

    pub fn uses_jump(self) -> bool {
        matches!(self, Variant::Full | Variant::NoPhysics | Variant::NoOde)
    }

    pub fn uses_physics(self) -> bool {
        matches!(self, Variant::Full | Variant::NoJump | Variant::NoOde)
    }

    pub fn message_passing(self) -> bool {
        self != Variant::MlpBaseline
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPhysics => "no-physics",
            Variant::NoJump => "no-jump",
            Variant::NoOde => "no-ode",
            Variant::GnnOnly => "gnn-only",
            Variant::MlpBaseline => "mlp-baseline",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.label() == s).ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiRoundConfig {
    pub rounds: usize,
    pub beta: f64,
}

impl Default for MultiRoundConfig {
    fn default() -> Self {
        MultiRoundConfig { rounds: 10, beta: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ode_time: f64,
    pub dropout: f64,
    pub gamma_init: f64,
    pub trip_threshold: f64,
    pub variant: Variant,
    pub multi_round: Option<MultiRoundConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            layers: 3,
            heads: 4,
            ode_time: 1.0,
            dropout: 0.1,
            gamma_init: 0.1,
            trip_threshold: 0.5,
            variant: Variant::Full,
            multi_round: None,
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, so callers can report them together.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.hidden_dim < 2 || self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            out.push(format!("hidden_dim {} must be a positive multiple of heads {}", self.hidden_dim, self.heads));
        }
        if self.layers == 0 {
            out.push("layers must be at least 1".into());
        }
        if !(self.ode_time >= 0.0 && self.ode_time.is_finite()) {
            out.push(format!("ode_time {} must be non-negative", self.ode_time));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if !(self.trip_threshold > 0.0 && self.trip_threshold < 1.0) {
            out.push(format!("trip_threshold {} must be in (0, 1)", self.trip_threshold));
        }
        if let Some(mr) = &self.multi_round {
            if mr.rounds == 0 {
                out.push("rounds must be at least 1".into());
            }
            if !(mr.beta > 0.0 && mr.beta <= 1.0) {
                out.push(format!("beta {} must be in (0, 1]", mr.beta));
            }
        }
        out
    }
}
