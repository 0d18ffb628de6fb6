use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{FelParams, HeadParams, LayerKind, NetworkParams, RouteParams, RouteSel};
use crate::numerics::{BatchStats, GramNorm, Matrix, NodeId, Tape};
use crate::pointcloud::ColoredPointCloud;

/// Batch norm mode for a forward pass. Inference uses frozen running
/// statistics and is a pure function of the input; training normalizes by
/// batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Tape leaves for one FEL's parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FelBinding {
    pub weight: NodeId,
    pub bias: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
}

/// Tape leaves for one route, in layer order.
#[derive(Debug, Clone)]
pub(crate) struct RouteBinding {
    pub layers: Vec<FelBinding>,
}

/// Tape leaves for the classifier head.
#[derive(Debug, Clone)]
pub(crate) struct HeadBinding {
    pub fc_weight: [NodeId; 3],
    pub fc_bias: [NodeId; 3],
    pub bn_gamma: [NodeId; 2],
    pub bn_beta: [NodeId; 2],
}

/// Mounts route parameters onto a tape, layers 1..=up_to only (mounting
/// deep unused layers would copy their weights every step for nothing).
/// The per-layer leaf order (weight, bias, gamma, beta) matches
/// `NetworkParams::flat_params_mut`.
pub(crate) fn bind_route(
    tape: &mut Tape,
    route: &RouteParams,
    trainable: bool,
    up_to: usize,
) -> RouteBinding {
    let mut mount = |m: &Matrix| {
        if trainable {
            tape.trainable(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    let layers = route
        .layers
        .iter()
        .take(up_to)
        .map(|fel| FelBinding {
            weight: mount(&fel.weight),
            bias: mount(&fel.bias),
            gamma: mount(&fel.bn.gamma),
            beta: mount(&fel.bn.beta),
        })
        .collect();
    RouteBinding { layers }
}

pub(crate) fn bind_head(tape: &mut Tape, head: &HeadParams, trainable: bool) -> HeadBinding {
    let mut mount = |m: &Matrix| {
        if trainable {
            tape.trainable(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    HeadBinding {
        fc_weight: [
            mount(&head.fc[0].weight),
            mount(&head.fc[1].weight),
            mount(&head.fc[2].weight),
        ],
        fc_bias: [
            mount(&head.fc[0].bias),
            mount(&head.fc[1].bias),
            mount(&head.fc[2].bias),
        ],
        bn_gamma: [mount(&head.bn[0].gamma), mount(&head.bn[1].gamma)],
        bn_beta: [mount(&head.bn[0].beta), mount(&head.bn[1].beta)],
    }
}

/// One FEL on the tape: F = leaky_relu(batch_norm(X W + b)), and
/// A = [F | rowwise max of F broadcast] (or just F for shared FC layers).
/// When `segments` is given, the rows of the input are a batch of stacked
/// clouds and the max/concat are per segment, while batch norm spans all
/// rows. Train mode also returns the batch statistics for running-stat
/// updates.
pub(crate) fn fel_forward_on_tape(
    tape: &mut Tape,
    input: NodeId,
    binding: &FelBinding,
    fel: &FelParams,
    mode: BnMode,
    kind: LayerKind,
    slope: f64,
    segments: Option<&[usize]>,
) -> Result<(NodeId, NodeId, Option<BatchStats>)> {
    let linear = tape.matmul(input, binding.weight)?;
    let biased = tape.add_row(linear, binding.bias)?;
    let (normed, stats) = match mode {
        BnMode::Train => {
            let (node, stats) = tape.batch_norm_train(biased, binding.gamma, binding.beta)?;
            (node, Some(stats))
        }
        BnMode::Infer => {
            let node = tape.batch_norm_infer(biased, binding.gamma, binding.beta, &fel.bn.stats)?;
            (node, None)
        }
    };
    let features = tape.leaky_relu(normed, slope)?;
    let output = match kind {
        LayerKind::Fel => match segments {
            Some(seg) => {
                let global = tape.segmented_max(features, seg)?;
                tape.concat_segment_broadcast(features, global, seg)?
            }
            None => {
                let global = tape.rowwise_max(features)?;
                tape.concat_broadcast(features, global)?
            }
        },
        LayerKind::SharedFc => features,
    };
    Ok((features, output, stats))
}

/// Output of a route forward: per-layer feature nodes F^1..F^max, the global
/// feature (max of the last computed F) when requested, and train-mode batch
/// statistics per layer.
pub(crate) struct RouteTapeOutput {
    pub features: Vec<NodeId>,
    pub global: Option<NodeId>,
    pub stats: Vec<BatchStats>,
}

/// Chains FELs up to `max_layer` (1..=4). With `segments`, the input rows
/// are a batch of stacked clouds and the requested global feature is one
/// row per segment.
pub(crate) fn route_forward_on_tape(
    tape: &mut Tape,
    input: NodeId,
    route: &RouteParams,
    binding: &RouteBinding,
    mode: BnMode,
    kind: LayerKind,
    slope: f64,
    max_layer: usize,
    want_global: bool,
    segments: Option<&[usize]>,
) -> Result<RouteTapeOutput> {
    debug_assert!((1..=4).contains(&max_layer));
    let expected = route.layers[0].input_width();
    let got = tape.value(input).cols();
    if got != expected {
        return Err(Error::ShapeMismatch {
            context: "route input width",
            left: (tape.value(input).rows(), got),
            right: (route.layers[0].weight.rows(), route.layers[0].weight.cols()),
        });
    }
    let mut features = Vec::with_capacity(max_layer);
    let mut stats = Vec::new();
    let mut current = input;
    for l in 0..max_layer {
        let (f, a, s) = fel_forward_on_tape(
            tape,
            current,
            &binding.layers[l],
            &route.layers[l],
            mode,
            kind,
            slope,
            segments,
        )?;
        features.push(f);
        if let Some(s) = s {
            stats.push(s);
        }
        current = a;
    }
    let global = if want_global {
        let last = *features.last().expect("max_layer >= 1");
        Some(match segments {
            Some(seg) => tape.segmented_max(last, seg)?,
            None => tape.rowwise_max(last)?,
        })
    } else {
        None
    };
    Ok(RouteTapeOutput {
        features,
        global,
        stats,
    })
}

/// Classifier head on the tape. Dropout (inverted, keep-scaled) applies to
/// the inputs of all three FC layers in train mode and is disabled at
/// inference. Returns the logits node plus train-mode batch statistics.
pub(crate) fn head_forward_on_tape(
    tape: &mut Tape,
    input: NodeId,
    head: &HeadParams,
    binding: &HeadBinding,
    mode: BnMode,
    slope: f64,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(NodeId, Vec<BatchStats>)> {
    let mut stats = Vec::new();
    let mut rng = dropout;
    let mut current = input;
    for i in 0..3 {
        if let Some((keep, rng)) = rng.as_mut() {
            let shape = tape.value(current).shape();
            let mask = dropout_mask(shape, *keep, rng);
            current = tape.mul_mask(current, mask)?;
        }
        let linear = tape.matmul(current, binding.fc_weight[i])?;
        let biased = tape.add_row(linear, binding.fc_bias[i])?;
        if i == 2 {
            return Ok((biased, stats));
        }
        let normed = match mode {
            BnMode::Train => {
                let (node, s) =
                    tape.batch_norm_train(biased, binding.bn_gamma[i], binding.bn_beta[i])?;
                stats.push(s);
                node
            }
            BnMode::Infer => tape.batch_norm_infer(
                biased,
                binding.bn_gamma[i],
                binding.bn_beta[i],
                &head.bn[i].stats,
            )?,
        };
        current = tape.leaky_relu(normed, slope)?;
    }
    unreachable!("loop returns at i == 2")
}

fn dropout_mask(shape: (usize, usize), keep: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let (rows, cols) = shape;
    let scale = 1.0 / keep;
    Matrix::from_raw(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| if rng.random_range(0.0..1.0) < keep { scale } else { 0.0 })
            .collect(),
    )
}

/// Eager single-layer forward in inference mode; returns (F, A).
pub fn fel_forward(
    input: &Matrix,
    fel: &FelParams,
    kind: LayerKind,
    slope: f64,
) -> Result<(Matrix, Matrix)> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let binding = FelBinding {
        weight: tape.constant(fel.weight.clone()),
        bias: tape.constant(fel.bias.clone()),
        gamma: tape.constant(fel.bn.gamma.clone()),
        beta: tape.constant(fel.bn.beta.clone()),
    };
    let (f, a, _) =
        fel_forward_on_tape(&mut tape, x, &binding, fel, BnMode::Infer, kind, slope, None)?;
    Ok((tape.value(f).clone(), tape.value(a).clone()))
}

/// Eager route forward in inference mode: per-layer features F^1..F^4 and
/// the global feature (rowwise max of F^4).
pub fn route_forward(
    points: &Matrix,
    route: &RouteParams,
    kind: LayerKind,
    slope: f64,
) -> Result<(Vec<Matrix>, Matrix)> {
    let mut tape = Tape::new();
    let input = tape.constant(points.clone());
    let binding = bind_route(&mut tape, route, false, 4);
    let out = route_forward_on_tape(
        &mut tape, input, route, &binding, BnMode::Infer, kind, slope, 4, true, None,
    )?;
    let features = out.features.iter().map(|&f| tape.value(f).clone()).collect();
    let global = tape.value(out.global.expect("global requested")).clone();
    Ok((features, global))
}

/// Builds the full classification graph for one cloud on a tape and returns
/// the logits node. Used by both `classify` and the trainer's eval pass.
pub(crate) fn classify_on_tape(
    tape: &mut Tape,
    cloud: &ColoredPointCloud,
    params: &NetworkParams,
) -> Result<NodeId> {
    let global = global_feature_on_tape(tape, cloud, params)?;
    let head_binding = bind_head(tape, &params.head, false);
    let (logits, _) = head_forward_on_tape(
        tape,
        global,
        &params.head,
        &head_binding,
        BnMode::Infer,
        params.leaky_slope,
        None,
    )?;
    Ok(logits)
}

/// The 1 x head_input_width fused global feature of one cloud.
pub(crate) fn global_feature_on_tape(
    tape: &mut Tape,
    cloud: &ColoredPointCloud,
    params: &NetworkParams,
) -> Result<NodeId> {
    let (geo, color) = cloud.split();
    match &params.routes {
        crate::network::Routes::Late { geometry, color: color_route } => {
            let geo_in = tape.constant(geo);
            let color_in = tape.constant(color);
            let geo_binding = bind_route(tape, geometry, false, 4);
            let geo_out = route_forward_on_tape(
                tape,
                geo_in,
                geometry,
                &geo_binding,
                BnMode::Infer,
                params.layer_kind,
                params.leaky_slope,
                4,
                true,
                None,
            )?;
            let color_binding = bind_route(tape, color_route, false, 4);
            let color_out = route_forward_on_tape(
                tape,
                color_in,
                color_route,
                &color_binding,
                BnMode::Infer,
                params.layer_kind,
                params.leaky_slope,
                4,
                true,
                None,
            )?;
            tape.concat_cols(geo_out.global.unwrap(), color_out.global.unwrap())
        }
        crate::network::Routes::Early { fused } => {
            let fused_in = {
                let joined = geo.hstack(&color)?;
                tape.constant(joined)
            };
            let binding = bind_route(tape, fused, false, 4);
            let out = route_forward_on_tape(
                tape,
                fused_in,
                fused,
                &binding,
                BnMode::Infer,
                params.layer_kind,
                params.leaky_slope,
                4,
                true,
                None,
            )?;
            Ok(out.global.unwrap())
        }
    }
}

/// Classifies a normalized cloud, returning raw logits (one per class).
/// Inference is deterministic: dropout disabled, batch norm frozen.
pub fn classify(cloud: &ColoredPointCloud, params: &NetworkParams) -> Result<Vec<f64>> {
    if !cloud.is_normalized() {
        return Err(Error::InvalidArgument(
            "classify expects a normalized cloud".into(),
        ));
    }
    let mut tape = Tape::new();
    let logits = classify_on_tape(&mut tape, cloud, params)?;
    Ok(tape.value(logits).row(0).to_vec())
}

/// Per-layer content features and style Gram matrices of one route.
#[derive(Debug, Clone)]
pub struct Representations {
    pub route: RouteSel,
    /// (layer index 1..=4, F^l) pairs, ascending by layer.
    pub content: Vec<(usize, Matrix)>,
    /// (layer index 1..=4, G(F^l)) pairs, ascending by layer.
    pub style: Vec<(usize, Matrix)>,
}

pub(crate) fn validate_layer_set(layers: &[usize], what: &str) -> Result<()> {
    for &l in layers {
        if !(1..=4).contains(&l) {
            return Err(Error::InvalidArgument(format!(
                "{what} layer {l} out of range 1..=4"
            )));
        }
    }
    Ok(())
}

/// Representation extraction on an existing tape: returns (layer, node)
/// pairs for content features and style Grams. Differentiable with respect
/// to whatever leaves `input` depends on.
pub(crate) fn extract_on_tape(
    tape: &mut Tape,
    input: NodeId,
    route: &RouteParams,
    kind: LayerKind,
    slope: f64,
    content_layers: &[usize],
    style_layers: &[usize],
    gram_norm: GramNorm,
) -> Result<(Vec<(usize, NodeId)>, Vec<(usize, NodeId)>)> {
    if content_layers.is_empty() && style_layers.is_empty() {
        return Err(Error::InvalidArgument(
            "extraction needs at least one content or style layer".into(),
        ));
    }
    validate_layer_set(content_layers, "content")?;
    validate_layer_set(style_layers, "style")?;
    let max_layer = content_layers
        .iter()
        .chain(style_layers)
        .copied()
        .max()
        .unwrap();
    let binding = bind_route(tape, route, false, max_layer);
    let out = route_forward_on_tape(
        tape, input, route, &binding, BnMode::Infer, kind, slope, max_layer, false, None,
    )?;

    let mut content: Vec<usize> = content_layers.to_vec();
    content.sort_unstable();
    content.dedup();
    let mut style: Vec<usize> = style_layers.to_vec();
    style.sort_unstable();
    style.dedup();

    let content_nodes = content.iter().map(|&l| (l, out.features[l - 1])).collect();
    let mut style_nodes = Vec::with_capacity(style.len());
    for &l in &style {
        style_nodes.push((l, tape.gram(out.features[l - 1], gram_norm.per_point())?));
    }
    Ok((content_nodes, style_nodes))
}

/// Extracts content features F^l and style Grams G(F^l) of `points` from
/// the selected route, in inference mode. Layer sets may not both be empty.
pub fn extract_representations(
    points: &Matrix,
    params: &NetworkParams,
    route_sel: RouteSel,
    content_layers: &[usize],
    style_layers: &[usize],
    gram_norm: GramNorm,
) -> Result<Representations> {
    let route = params.route(route_sel)?;
    let mut tape = Tape::new();
    let input = tape.constant(points.clone());
    let (content_nodes, style_nodes) = extract_on_tape(
        &mut tape,
        input,
        route,
        params.layer_kind,
        params.leaky_slope,
        content_layers,
        style_layers,
        gram_norm,
    )?;
    Ok(Representations {
        route: route_sel,
        content: content_nodes
            .into_iter()
            .map(|(l, id)| (l, tape.value(id).clone()))
            .collect(),
        style: style_nodes
            .into_iter()
            .map(|(l, id)| (l, tape.value(id).clone()))
            .collect(),
    })
}

/// Stacks the given clouds' inputs for one route selector.
pub(crate) fn stacked_route_input(
    clouds: &[&ColoredPointCloud],
    sel: RouteSel,
) -> Result<Matrix> {
    let mut parts = Vec::with_capacity(clouds.len());
    for cloud in clouds {
        let (geo, color) = cloud.split();
        parts.push(match sel {
            RouteSel::Geometry => geo,
            RouteSel::Color => color,
            RouteSel::Fused => geo.hstack(&color)?,
        });
    }
    Matrix::vstack(&parts.iter().collect::<Vec<_>>())
}

/// Populates batch-norm running statistics by one train-mode forward pass
/// over the given clouds as a single batch (at least two, so the head sees
/// a batch). Useful when a feature extractor is needed without full
/// training.
pub fn warm_running_stats(
    params: &mut NetworkParams,
    clouds: &[&ColoredPointCloud],
) -> Result<()> {
    if clouds.len() < 2 {
        return Err(Error::InvalidArgument(
            "warming running stats needs at least 2 clouds".into(),
        ));
    }
    if clouds.iter().any(|c| !c.is_normalized()) {
        return Err(Error::InvalidArgument(
            "warm_running_stats expects normalized clouds".into(),
        ));
    }
    let segments: Vec<usize> = clouds.iter().map(|c| c.len()).collect();
    let selectors: Vec<RouteSel> = match params.fusion() {
        crate::network::Fusion::Late => vec![RouteSel::Geometry, RouteSel::Color],
        crate::network::Fusion::Early => vec![RouteSel::Fused],
    };
    let mut globals: Vec<Matrix> = Vec::with_capacity(selectors.len());
    for (r, &sel) in selectors.iter().enumerate() {
        let stacked = stacked_route_input(clouds, sel)?;
        let mut tape = Tape::new();
        let input_node = tape.constant(stacked);
        let stats = {
            let route = params.route(sel)?;
            let binding = bind_route(&mut tape, route, false, 4);
            let out = route_forward_on_tape(
                &mut tape,
                input_node,
                route,
                &binding,
                BnMode::Train,
                params.layer_kind,
                params.leaky_slope,
                4,
                true,
                Some(&segments),
            )?;
            globals.push(tape.value(out.global.unwrap()).clone());
            out.stats
        };
        let route_mut = match (&mut params.routes, r) {
            (crate::network::Routes::Late { geometry, .. }, 0) => geometry,
            (crate::network::Routes::Late { color, .. }, _) => color,
            (crate::network::Routes::Early { fused }, _) => fused,
        };
        for (l, s) in stats.iter().enumerate() {
            route_mut.layers[l].bn.stats.update(s);
        }
    }

    let features = if globals.len() == 2 {
        globals[0].hstack(&globals[1])?
    } else {
        globals.pop().unwrap()
    };
    let mut tape = Tape::new();
    let input = tape.constant(features);
    let binding = bind_head(&mut tape, &params.head, false);
    let (_, head_stats) = head_forward_on_tape(
        &mut tape,
        input,
        &params.head,
        &binding,
        BnMode::Train,
        params.leaky_slope,
        None,
    )?;
    for (i, s) in head_stats.iter().enumerate() {
        params.head.bn[i].stats.update(s);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::pointcloud::ColoredPointCloud;
    use rand::{Rng, SeedableRng};

    fn random_cloud(n: usize, seed: u64) -> ColoredPointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = Matrix::from_raw(n, 3, (0..n * 3).map(|_| rng.random_range(-3.0..3.0)).collect());
        let colors = Matrix::from_raw(n, 3, (0..n * 3).map(|_| rng.random_range(0.0..255.0)).collect());
        ColoredPointCloud::new(positions, colors).unwrap().normalize().unwrap()
    }

    fn warmed_params(class_count: usize, seed: u64) -> NetworkParams {
        let mut config = NetworkConfig::desk(class_count);
        config.seed = seed;
        let mut params = NetworkParams::init(&config).unwrap();
        let a = random_cloud(24, 1000 + seed);
        let b = random_cloud(24, 2000 + seed);
        warm_running_stats(&mut params, &[&a, &b]).unwrap();
        params
    }

    #[test]
    fn untrained_network_rejects_inference() {
        let params = NetworkParams::init(&NetworkConfig::desk(2)).unwrap();
        let cloud = random_cloud(8, 3);
        assert!(matches!(
            classify(&cloud, &params),
            Err(Error::StatsNotReady)
        ));
    }

    #[test]
    fn logits_length_matches_class_count() {
        let params = warmed_params(5, 0);
        let cloud = random_cloud(16, 4);
        let logits = classify(&cloud, &params).unwrap();
        assert_eq!(logits.len(), 5);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn classification_rejects_unnormalized_cloud() {
        let params = warmed_params(3, 1);
        let positions = Matrix::filled(4, 3, 2.0);
        let colors = Matrix::filled(4, 3, 100.0);
        let raw = ColoredPointCloud::new(positions, colors).unwrap();
        assert!(classify(&raw, &params).is_err());
    }

    #[test]
    fn logits_exactly_invariant_to_point_order() {
        let params = warmed_params(4, 2);
        let cloud = random_cloud(32, 5);
        let perm: Vec<usize> = (0..32).rev().collect();
        let shuffled = cloud.permute_rows(&perm).unwrap();
        let a = classify(&cloud, &params).unwrap();
        let b = classify(&shuffled, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inference_is_deterministic() {
        let params = warmed_params(4, 3);
        let cloud = random_cloud(16, 6);
        assert_eq!(
            classify(&cloud, &params).unwrap(),
            classify(&cloud, &params).unwrap()
        );
    }

    #[test]
    fn single_point_fel_concatenates_its_own_max() {
        let params = warmed_params(2, 4);
        let route = params.route(RouteSel::Geometry).unwrap();
        let input = Matrix::from_raw(1, 3, vec![0.3, -0.2, 0.9]);
        let (f, a) = fel_forward(&input, &route.layers[0], LayerKind::Fel, 0.2).unwrap();
        assert_eq!(a.cols(), 2 * f.cols());
        let m = f.cols();
        assert_eq!(&a.row(0)[..m], f.row(0));
        assert_eq!(&a.row(0)[m..], f.row(0));
    }

    #[test]
    fn shared_fc_output_width_is_not_doubled() {
        let params = warmed_params(2, 5);
        let route = params.route(RouteSel::Geometry).unwrap();
        let input = Matrix::from_raw(3, 3, vec![0.1; 9]);
        let (f, a) = fel_forward(&input, &route.layers[0], LayerKind::SharedFc, 0.2).unwrap();
        assert_eq!(a.shape(), f.shape());
    }

    #[test]
    fn fel_permutation_equivariance() {
        let params = warmed_params(2, 6);
        let route = params.route(RouteSel::Geometry).unwrap();
        let cloud = random_cloud(10, 7);
        let perm: Vec<usize> = vec![3, 1, 4, 0, 9, 2, 7, 5, 8, 6];
        let (f, a) = fel_forward(cloud.positions(), &route.layers[0], LayerKind::Fel, 0.2).unwrap();
        let permuted_input = cloud.positions().permute_rows(&perm).unwrap();
        let (fp, ap) = fel_forward(&permuted_input, &route.layers[0], LayerKind::Fel, 0.2).unwrap();
        // Rows permute identically; the global half of every row is unchanged.
        assert_eq!(fp, f.permute_rows(&perm).unwrap());
        let m = f.cols();
        for i in 0..a.rows() {
            assert_eq!(&ap.row(i)[m..], &a.row(0)[m..]);
        }
    }

    #[test]
    fn global_feature_invariant_to_duplication() {
        let params = warmed_params(2, 7);
        let route = params.route(RouteSel::Color).unwrap();
        let cloud = random_cloud(12, 8);
        let (_, global) =
            route_forward(cloud.colors(), route, params.layer_kind, params.leaky_slope).unwrap();
        let doubled = Matrix::vstack(&[cloud.colors(), cloud.colors()]).unwrap();
        let (_, global2) =
            route_forward(&doubled, route, params.layer_kind, params.leaky_slope).unwrap();
        assert_eq!(global, global2);
    }

    #[test]
    fn feature_shapes_follow_configured_widths() {
        let params = warmed_params(2, 8);
        let route = params.route(RouteSel::Geometry).unwrap();
        let cloud = random_cloud(20, 9);
        let (features, global) =
            route_forward(cloud.positions(), route, params.layer_kind, params.leaky_slope)
                .unwrap();
        for (l, f) in features.iter().enumerate() {
            assert_eq!(f.shape(), (20, params.layer_widths[l]));
        }
        assert_eq!(global.shape(), (1, params.layer_widths[3]));
    }

    #[test]
    fn gram_shape_independent_of_cardinality() {
        let params = warmed_params(2, 9);
        for n in [1usize, 7, 64] {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + n as u64);
            let colors =
                Matrix::from_raw(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect());
            let reps = extract_representations(
                &colors,
                &params,
                RouteSel::Color,
                &[],
                &[1, 4],
                GramNorm::PerPoint,
            )
            .unwrap();
            assert_eq!(reps.style[0].1.shape(), (params.layer_widths[0], params.layer_widths[0]));
            assert_eq!(reps.style[1].1.shape(), (params.layer_widths[3], params.layer_widths[3]));
        }
    }

    #[test]
    fn representations_permutation_behavior() {
        let params = warmed_params(2, 10);
        let cloud = random_cloud(16, 11);
        let perm: Vec<usize> = (0..16).rev().collect();
        let permuted = cloud.permute_rows(&perm).unwrap();
        let reps = extract_representations(
            cloud.positions(),
            &params,
            RouteSel::Geometry,
            &[1, 2],
            &[1, 2],
            GramNorm::PerPoint,
        )
        .unwrap();
        let reps_p = extract_representations(
            permuted.positions(),
            &params,
            RouteSel::Geometry,
            &[1, 2],
            &[1, 2],
            GramNorm::PerPoint,
        )
        .unwrap();
        for ((_, f), (_, fp)) in reps.content.iter().zip(&reps_p.content) {
            assert_eq!(fp, &f.permute_rows(&perm).unwrap());
        }
        for ((_, g), (_, gp)) in reps.style.iter().zip(&reps_p.style) {
            assert!(g.max_abs_diff(gp) < 1e-9);
        }
    }

    #[test]
    fn extraction_requires_a_layer_set() {
        let params = warmed_params(2, 11);
        let cloud = random_cloud(8, 12);
        assert!(extract_representations(
            cloud.positions(),
            &params,
            RouteSel::Geometry,
            &[],
            &[],
            GramNorm::PerPoint,
        )
        .is_err());
    }

    #[test]
    fn extraction_is_bitwise_deterministic() {
        let params = warmed_params(2, 12);
        let cloud = random_cloud(16, 13);
        let run = || {
            extract_representations(
                cloud.positions(),
                &params,
                RouteSel::Geometry,
                &[1],
                &[2, 3],
                GramNorm::PerPoint,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        for ((_, x), (_, y)) in a.content.iter().zip(&b.content) {
            assert_eq!(x, y);
        }
        for ((_, x), (_, y)) in a.style.iter().zip(&b.style) {
            assert_eq!(x, y);
        }
    }
}
