//! The two-route feature-encoding classification network.
//!
//! Each route is a stack of four feature encoding layers (FELs). A FEL
//! applies a shared per-point linear map, batch norm, and leaky ReLU to get
//! the feature response F; the column-wise max of F is concatenated back
//! onto every row to form the layer output A, so later layers see both
//! local and global information. Content representations are the F
//! matrices; style representations are their Gram matrices.
//!
//! Late fusion runs geometry (XYZ) and color (RGB) through separate routes
//! and concatenates the two global features before the classifier head.
//! Early fusion runs a single route on the N x 6 input. With
//! `LayerKind::SharedFc` the max-concat step is skipped and a FEL degrades
//! to a plain shared fully-connected layer.

mod checkpoint;
mod forward;

pub use checkpoint::{load_params, save_params};
pub use forward::{
    classify, extract_representations, fel_forward, route_forward, warm_running_stats, BnMode,
    Representations,
};
pub(crate) use forward::{
    bind_head, bind_route, extract_on_tape, head_forward_on_tape, route_forward_on_tape,
    stacked_route_input, validate_layer_set,
};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RunningStats};

/// How geometry and color are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Two separate routes; global features concatenated before the head.
    Late,
    /// One route consuming the full N x 6 point matrix.
    Early,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Late => "late",
            Fusion::Early => "early",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "late" => Ok(Fusion::Late),
            "early" => Ok(Fusion::Early),
            other => Err(Error::InvalidArgument(format!(
                "unknown fusion mode {other:?}; expected late or early"
            ))),
        }
    }
}

/// Whether layers perform the max-concat step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Fel,
    SharedFc,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Fel => "fel",
            LayerKind::SharedFc => "shared_fc",
        })
    }
}

impl FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fel" => Ok(LayerKind::Fel),
            "shared_fc" | "shared-fc" | "sharedfc" => Ok(LayerKind::SharedFc),
            other => Err(Error::InvalidArgument(format!(
                "unknown layer kind {other:?}; expected fel or shared_fc"
            ))),
        }
    }
}

/// Which route to read representations from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteSel {
    Geometry,
    Color,
    Fused,
}

impl fmt::Display for RouteSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouteSel::Geometry => "geometry",
            RouteSel::Color => "color",
            RouteSel::Fused => "fused",
        })
    }
}

/// Per-layer batch norm parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub stats: RunningStats,
}

impl BatchNormParams {
    pub fn new(width: usize) -> Self {
        BatchNormParams {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
            stats: RunningStats::new(width),
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }
}

/// One feature encoding layer: shared linear map plus batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FelParams {
    pub weight: Matrix,
    pub bias: Matrix,
    pub bn: BatchNormParams,
}

impl FelParams {
    pub fn width(&self) -> usize {
        self.weight.cols()
    }

    pub fn input_width(&self) -> usize {
        self.weight.rows()
    }
}

/// The four FELs of one route.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteParams {
    pub layers: [FelParams; 4],
}

/// One fully-connected layer of the classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct FcParams {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Three-layer classifier head; batch norm on all but the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub fc: [FcParams; 3],
    pub bn: [BatchNormParams; 2],
}

/// Route parameters for the configured fusion mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Routes {
    Late {
        geometry: RouteParams,
        color: RouteParams,
    },
    Early {
        fused: RouteParams,
    },
}

/// Architecture hyperparameters for [`NetworkParams::init`].
#[derive(Debug, Clone)]
pub struct NetworkConfig {
    /// Widths m_1..m_4 of the feature responses F^1..F^4.
    pub layer_widths: [usize; 4],
    /// Hidden widths of the classifier head.
    pub head_widths: [usize; 2],
    pub class_count: usize,
    pub fusion: Fusion,
    pub layer_kind: LayerKind,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(class_count: usize) -> Self {
        NetworkConfig {
            layer_widths: [64, 256, 1024, 2048],
            head_widths: [512, 128],
            class_count,
            fusion: Fusion::Late,
            layer_kind: LayerKind::Fel,
            leaky_slope: 0.2,
            seed: 0,
        }
    }

    /// Small widths suitable for tests and quick experiments.
    pub fn desk(class_count: usize) -> Self {
        NetworkConfig {
            layer_widths: [8, 12, 16, 24],
            head_widths: [32, 16],
            ..NetworkConfig::new(class_count)
        }
    }
}

/// Full parameter set: routes, head, and architecture metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub routes: Routes,
    pub head: HeadParams,
    pub layer_widths: [usize; 4],
    pub head_widths: [usize; 2],
    pub class_count: usize,
    pub layer_kind: LayerKind,
    pub leaky_slope: f64,
    pub class_names: Vec<String>,
}

impl NetworkParams {
    /// Freshly initialized parameters: fan-in scaled normal weights, zero
    /// biases, batch norm at gamma = 1 / beta = 0 with unpopulated running
    /// stats. Deterministic under the config seed.
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        if config.class_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "class count must be at least 2, got {}",
                config.class_count
            )));
        }
        if config.layer_widths.iter().any(|&w| w == 0)
            || config.head_widths.iter().any(|&w| w == 0)
        {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let mut make_route = |input_width: usize| -> RouteParams {
            let mut layers = Vec::with_capacity(4);
            let mut d_in = input_width;
            for &m in &config.layer_widths {
                layers.push(FelParams {
                    weight: he_normal(d_in, m, &mut rng),
                    bias: Matrix::zeros(1, m),
                    bn: BatchNormParams::new(m),
                });
                d_in = match config.layer_kind {
                    LayerKind::Fel => 2 * m,
                    LayerKind::SharedFc => m,
                };
            }
            RouteParams {
                layers: layers.try_into().expect("exactly 4 layers"),
            }
        };

        let routes = match config.fusion {
            Fusion::Late => Routes::Late {
                geometry: make_route(3),
                color: make_route(3),
            },
            Fusion::Early => Routes::Early {
                fused: make_route(6),
            },
        };

        let head_in = match config.fusion {
            Fusion::Late => 2 * config.layer_widths[3],
            Fusion::Early => config.layer_widths[3],
        };
        let [h1, h2] = config.head_widths;
        let head = HeadParams {
            fc: [
                FcParams {
                    weight: he_normal(head_in, h1, &mut rng),
                    bias: Matrix::zeros(1, h1),
                },
                FcParams {
                    weight: he_normal(h1, h2, &mut rng),
                    bias: Matrix::zeros(1, h2),
                },
                FcParams {
                    weight: he_normal(h2, config.class_count, &mut rng),
                    bias: Matrix::zeros(1, config.class_count),
                },
            ],
            bn: [BatchNormParams::new(h1), BatchNormParams::new(h2)],
        };

        let params = NetworkParams {
            routes,
            head,
            layer_widths: config.layer_widths,
            head_widths: config.head_widths,
            class_count: config.class_count,
            layer_kind: config.layer_kind,
            leaky_slope: config.leaky_slope,
            class_names: (0..config.class_count).map(|i| format!("class-{i}")).collect(),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn fusion(&self) -> Fusion {
        match self.routes {
            Routes::Late { .. } => Fusion::Late,
            Routes::Early { .. } => Fusion::Early,
        }
    }

    /// The route for a selector; requesting a geometry or color route on an
    /// early-fusion network (or the fused route on a late-fusion one) is an
    /// error because no such route exists.
    pub fn route(&self, sel: RouteSel) -> Result<&RouteParams> {
        match (&self.routes, sel) {
            (Routes::Late { geometry, .. }, RouteSel::Geometry) => Ok(geometry),
            (Routes::Late { color, .. }, RouteSel::Color) => Ok(color),
            (Routes::Early { fused }, RouteSel::Fused) => Ok(fused),
            (Routes::Late { .. }, RouteSel::Fused) => Err(Error::Config(
                "late-fusion network has no fused route; request geometry or color".into(),
            )),
            (Routes::Early { .. }, _) => Err(Error::Config(format!(
                "early-fusion network has no separate {sel} route; only the fused \
                 representation exists"
            ))),
        }
    }

    pub fn head_input_width(&self) -> usize {
        match self.fusion() {
            Fusion::Late => 2 * self.layer_widths[3],
            Fusion::Early => self.layer_widths[3],
        }
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.class_count {
            return Err(Error::InvalidArgument(format!(
                "{} class names for {} classes",
                names.len(),
                self.class_count
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    /// Structural consistency: layer input widths follow the layer kind
    /// (2*m_(l-1) with the max-concat step, m_(l-1) without), head widths
    /// chain, and batch-norm widths match.
    pub fn validate(&self) -> Result<()> {
        let routes: Vec<(&str, &RouteParams, usize)> = match &self.routes {
            Routes::Late { geometry, color } => {
                vec![("geometry", geometry, 3), ("color", color, 3)]
            }
            Routes::Early { fused } => vec![("fused", fused, 6)],
        };
        for (name, route, mut d_in) in routes {
            for (l, fel) in route.layers.iter().enumerate() {
                let m = self.layer_widths[l];
                if fel.weight.shape() != (d_in, m) {
                    return Err(Error::Checkpoint(format!(
                        "{name} route layer {} weight is {}x{}, expected {d_in}x{m}",
                        l + 1,
                        fel.weight.rows(),
                        fel.weight.cols()
                    )));
                }
                for (what, mat) in [
                    ("bias", &fel.bias),
                    ("gamma", &fel.bn.gamma),
                    ("beta", &fel.bn.beta),
                ] {
                    if mat.shape() != (1, m) {
                        return Err(Error::Checkpoint(format!(
                            "{name} route layer {} {what} is {}x{}, expected 1x{m}",
                            l + 1,
                            mat.rows(),
                            mat.cols()
                        )));
                    }
                }
                if fel.bn.stats.mean.len() != m || fel.bn.stats.var.len() != m {
                    return Err(Error::Checkpoint(format!(
                        "{name} route layer {} running stats width mismatch",
                        l + 1
                    )));
                }
                d_in = match self.layer_kind {
                    LayerKind::Fel => 2 * m,
                    LayerKind::SharedFc => m,
                };
            }
        }
        let widths = [
            self.head_input_width(),
            self.head_widths[0],
            self.head_widths[1],
            self.class_count,
        ];
        for (i, fc) in self.head.fc.iter().enumerate() {
            if fc.weight.shape() != (widths[i], widths[i + 1]) {
                return Err(Error::Checkpoint(format!(
                    "head fc{} weight is {}x{}, expected {}x{}",
                    i + 1,
                    fc.weight.rows(),
                    fc.weight.cols(),
                    widths[i],
                    widths[i + 1]
                )));
            }
            if fc.bias.shape() != (1, widths[i + 1]) {
                return Err(Error::Checkpoint(format!("head fc{} bias width mismatch", i + 1)));
            }
        }
        for (i, bn) in self.head.bn.iter().enumerate() {
            if bn.width() != self.head_widths[i] {
                return Err(Error::Checkpoint(format!(
                    "head bn{} width {} does not match {}",
                    i + 1,
                    bn.width(),
                    self.head_widths[i]
                )));
            }
        }
        if self.class_names.len() != self.class_count {
            return Err(Error::Checkpoint("class name count mismatch".into()));
        }
        Ok(())
    }

    /// Every trainable matrix in the canonical flat order shared by the
    /// trainer's gradient accumulation and the tape bindings: routes first
    /// (geometry then color, or the single fused route), each layer
    /// contributing weight, bias, gamma, beta; then the head as fc1 w/b,
    /// bn1 gamma/beta, fc2 w/b, bn2 gamma/beta, fc3 w/b.
    pub(crate) fn flat_params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        let routes: Vec<&mut RouteParams> = match &mut self.routes {
            Routes::Late { geometry, color } => vec![geometry, color],
            Routes::Early { fused } => vec![fused],
        };
        for route in routes {
            for fel in &mut route.layers {
                out.push(&mut fel.weight);
                out.push(&mut fel.bias);
                out.push(&mut fel.bn.gamma);
                out.push(&mut fel.bn.beta);
            }
        }
        let [fc0, fc1, fc2] = &mut self.head.fc;
        let [bn0, bn1] = &mut self.head.bn;
        out.push(&mut fc0.weight);
        out.push(&mut fc0.bias);
        out.push(&mut bn0.gamma);
        out.push(&mut bn0.beta);
        out.push(&mut fc1.weight);
        out.push(&mut fc1.bias);
        out.push(&mut bn1.gamma);
        out.push(&mut bn1.beta);
        out.push(&mut fc2.weight);
        out.push(&mut fc2.bias);
        out
    }

}

/// Free-function alias for [`NetworkParams::init`].
pub fn init_params(config: &NetworkConfig) -> Result<NetworkParams> {
    NetworkParams::init(config)
}

fn he_normal(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    Matrix::from_raw(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_under_seed() {
        let config = NetworkConfig::desk(4);
        let a = NetworkParams::init(&config).unwrap();
        let b = NetworkParams::init(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_batch_norm_defaults() {
        let params = NetworkParams::init(&NetworkConfig::desk(3)).unwrap();
        let Routes::Late { geometry, .. } = &params.routes else {
            panic!("expected late fusion")
        };
        for fel in &geometry.layers {
            assert!(fel.bn.gamma.data().iter().all(|&v| v == 1.0));
            assert!(fel.bn.beta.data().iter().all(|&v| v == 0.0));
            assert!(!fel.bn.stats.ready);
        }
    }

    #[test]
    fn layer_input_widths_follow_layer_kind() {
        let fel = NetworkParams::init(&NetworkConfig::desk(2)).unwrap();
        let Routes::Late { geometry, .. } = &fel.routes else {
            panic!()
        };
        assert_eq!(geometry.layers[0].input_width(), 3);
        for l in 1..4 {
            assert_eq!(
                geometry.layers[l].input_width(),
                2 * fel.layer_widths[l - 1]
            );
        }

        let mut config = NetworkConfig::desk(2);
        config.layer_kind = LayerKind::SharedFc;
        let shared = NetworkParams::init(&config).unwrap();
        let Routes::Late { geometry, .. } = &shared.routes else {
            panic!()
        };
        for l in 1..4 {
            assert_eq!(geometry.layers[l].input_width(), shared.layer_widths[l - 1]);
        }
    }

    #[test]
    fn early_fusion_layer_one_consumes_six_columns() {
        let mut config = NetworkConfig::desk(2);
        config.fusion = Fusion::Early;
        let params = NetworkParams::init(&config).unwrap();
        let Routes::Early { fused } = &params.routes else {
            panic!()
        };
        assert_eq!(fused.layers[0].input_width(), 6);
        assert_eq!(params.head_input_width(), params.layer_widths[3]);
    }

    #[test]
    fn route_selector_respects_fusion() {
        let late = NetworkParams::init(&NetworkConfig::desk(2)).unwrap();
        assert!(late.route(RouteSel::Geometry).is_ok());
        assert!(late.route(RouteSel::Fused).is_err());

        let mut config = NetworkConfig::desk(2);
        config.fusion = Fusion::Early;
        let early = NetworkParams::init(&config).unwrap();
        assert!(early.route(RouteSel::Fused).is_ok());
        let err = early.route(RouteSel::Color).unwrap_err().to_string();
        assert!(err.contains("no separate"), "{err}");
    }

    #[test]
    fn default_widths_match_published_architecture() {
        let config = NetworkConfig::new(16);
        assert_eq!(config.layer_widths, [64, 256, 1024, 2048]);
        // Two 2048-wide global features concatenate to 4096.
        let params = NetworkParams::init(&config).unwrap();
        assert_eq!(params.head_input_width(), 4096);
    }
}
