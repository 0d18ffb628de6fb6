//! Desk-scale classifier training: the feature extractor the transfer
//! engine consumes. Cross-entropy over softmax logits, Adam, batch norm in
//! train mode, dropout on the classifier head.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{
    bind_head, bind_route, head_forward_on_tape, route_forward_on_tape, BnMode, NetworkConfig,
    NetworkParams, RouteSel, Routes,
};
use crate::numerics::{Optimizer, OptimizerKind, Tape};
use crate::pointcloud::{ColoredPointCloud, LabeledDataset, SplitTag};

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub dropout_keep: f64,
    pub rebalance_target: usize,
    /// Fraction of the (rebalanced) training set carved out for validation.
    pub val_fraction: f64,
    /// Stop once validation accuracy reaches this threshold, if set.
    pub early_stop_val_acc: Option<f64>,
    /// Optional multiplicative learning-rate decay per epoch.
    pub lr_decay: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            dropout_keep: 0.7,
            rebalance_target: 320,
            val_fraction: 0.1,
            early_stop_val_acc: None,
            lr_decay: None,
            seed: 0,
        }
    }
}

/// Per-epoch training trace entry.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Result of [`train`]: the best-validation-accuracy parameters plus the
/// per-epoch trace.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: NetworkParams,
    pub trace: Vec<EpochStats>,
    pub best_val_acc: f64,
}

/// Classification metrics over a labeled dataset.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    pub multiclass_auc: f64,
    pub per_class_counts: Vec<usize>,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<usize>>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "accuracy {:.4}  multiclass AUC {:.4}",
            self.accuracy, self.multiclass_auc
        )?;
        writeln!(f, "per-class counts: {:?}", self.per_class_counts)?;
        writeln!(f, "confusion (rows = true class):")?;
        for row in &self.confusion {
            writeln!(f, "  {row:?}")?;
        }
        Ok(())
    }
}

/// Resamples every class to exactly `target` instances: undersampling is
/// uniform without replacement, oversampling uniform with replacement, and
/// classes already at `target` keep their membership unchanged.
pub fn rebalance(dataset: &LabeledDataset, target: usize, seed: u64) -> Result<LabeledDataset> {
    if target == 0 {
        return Err(Error::InvalidArgument("rebalance target must be positive".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (i, cloud) in dataset.clouds.iter().enumerate() {
        by_class[cloud.label().expect("labeled dataset")].push(i);
    }
    if let Some(empty) = by_class.iter().position(|m| m.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "class {empty} has no instances to rebalance"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clouds = Vec::with_capacity(dataset.class_count * target);
    for members in &by_class {
        if members.len() == target {
            for &i in members {
                clouds.push(dataset.clouds[i].clone());
            }
        } else if members.len() > target {
            let mut chosen = rand::seq::index::sample(&mut rng, members.len(), target).into_vec();
            chosen.sort_unstable();
            for pos in chosen {
                clouds.push(dataset.clouds[members[pos]].clone());
            }
        } else {
            use rand::Rng;
            for _ in 0..target {
                let pos = rng.random_range(0..members.len());
                clouds.push(dataset.clouds[members[pos]].clone());
            }
        }
    }
    LabeledDataset::new(
        clouds,
        dataset.class_count,
        dataset.class_names.clone(),
        dataset.split,
    )
}

fn route_selectors(params: &NetworkParams) -> Vec<RouteSel> {
    match params.routes {
        Routes::Late { .. } => vec![RouteSel::Geometry, RouteSel::Color],
        Routes::Early { .. } => vec![RouteSel::Fused],
    }
}

/// Cross-entropy training per the standard recipe: shuffled mini-batches,
/// per-cloud route forwards in batch-norm train mode, the classifier head
/// over the stacked batch of global features with dropout, Adam updates.
/// Returns the best-validation-accuracy checkpoint and a per-epoch trace.
/// Deterministic under the config seed.
pub fn train(
    dataset: &LabeledDataset,
    net_config: &NetworkConfig,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if config.batch_size < 2 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 2 (train-mode batch norm)".into(),
        ));
    }
    if !(0.0..=1.0).contains(&config.dropout_keep) || config.dropout_keep == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "dropout keep ratio must lie in (0, 1], got {}",
            config.dropout_keep
        )));
    }
    if dataset.class_count < 2 {
        return Err(Error::InvalidArgument("training needs at least 2 classes".into()));
    }

    let rebalanced = rebalance(dataset, config.rebalance_target, config.seed)?;
    let (train_ds, val_ds) =
        rebalanced.stratified_split(config.val_fraction, config.seed.wrapping_add(1), SplitTag::Val)?;

    let mut params = NetworkParams::init(net_config)?
        .with_class_names(dataset.class_names.clone())?;
    let mut optimizer = Optimizer::new(OptimizerKind::Adam, config.learning_rate)
        .with_betas(config.beta1, config.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));

    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        if let Some(decay) = config.lr_decay {
            if epoch > 1 {
                optimizer.learning_rate *= decay;
            }
        }
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        let mut epoch_seen = 0usize;
        let mut batches = 0usize;

        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                log::warn!(
                    "skipping batch of size {} at epoch {epoch}: train-mode batch norm needs >= 2",
                    batch.len()
                );
                continue;
            }
            let (loss, correct) = train_batch(
                &mut params,
                &mut optimizer,
                &train_ds,
                batch,
                config,
                &mut rng,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: epoch,
                    detail: format!("training batch {batches} produced loss {loss}"),
                });
            }
            epoch_loss += loss;
            epoch_correct += correct;
            epoch_seen += batch.len();
            batches += 1;
        }

        let train_loss = epoch_loss / batches.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: epoch,
                detail: "epoch mean loss is not finite".into(),
            });
        }
        let train_acc = epoch_correct as f64 / epoch_seen.max(1) as f64;
        let val_acc = accuracy(&params, &val_ds)?;
        trace.push(EpochStats {
            epoch,
            train_loss,
            train_acc,
            val_acc,
        });
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4}, train acc {train_acc:.4}, val acc {val_acc:.4}"
        );

        if val_acc > best_val_acc {
            best_val_acc = val_acc;
            best_params = params.clone();
        }
        if let Some(threshold) = config.early_stop_val_acc {
            if val_acc >= threshold {
                log::info!("early stop at epoch {epoch}: val acc {val_acc:.4} >= {threshold:.4}");
                break;
            }
        }
    }

    Ok(TrainReport {
        params: best_params,
        trace,
        best_val_acc,
    })
}

/// One batch on one tape: the clouds' inputs stack into a single matrix
/// with per-cloud segments, so batch norm spans the whole batch while the
/// max/concat steps stay per cloud. The segmented max of the last layer is
/// the batch of global features, which feeds the head directly.
fn train_batch(
    params: &mut NetworkParams,
    optimizer: &mut Optimizer,
    ds: &LabeledDataset,
    batch: &[usize],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let selectors = route_selectors(params);
    let clouds: Vec<&ColoredPointCloud> = batch.iter().map(|&i| &ds.clouds[i]).collect();
    let segments: Vec<usize> = clouds.iter().map(|c| c.len()).collect();
    let targets: Vec<usize> = clouds
        .iter()
        .map(|c| c.label().expect("labeled dataset"))
        .collect();

    let mut tape = Tape::new();
    let mut route_bindings = Vec::with_capacity(selectors.len());
    let mut route_stats = Vec::with_capacity(selectors.len());
    let mut globals = Vec::with_capacity(selectors.len());
    for &sel in &selectors {
        let stacked = crate::network::stacked_route_input(&clouds, sel)?;
        let input_node = tape.constant(stacked);
        let route = params.route(sel)?;
        let binding = bind_route(&mut tape, route, true, 4);
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
        globals.push(out.global.expect("global requested"));
        route_stats.push(out.stats);
        route_bindings.push(binding);
    }
    let features = if globals.len() == 2 {
        tape.concat_cols(globals[0], globals[1])?
    } else {
        globals[0]
    };

    let head_binding = bind_head(&mut tape, &params.head, true);
    let (logits, head_stats) = head_forward_on_tape(
        &mut tape,
        features,
        &params.head,
        &head_binding,
        BnMode::Train,
        params.leaky_slope,
        Some((config.dropout_keep, rng)),
    )?;
    let loss = tape.softmax_cross_entropy(logits, &targets)?;
    let loss_value = tape.scalar_value(loss);
    let correct = {
        let l = tape.value(logits);
        (0..l.rows())
            .filter(|&i| argmax(l.row(i)) == targets[i])
            .count()
    };

    let grads = tape.backward(loss)?;

    for (r, stats) in route_stats.iter().enumerate() {
        let route = route_mut(params, r);
        for (l, s) in stats.iter().enumerate() {
            route.layers[l].bn.stats.update(s);
        }
    }
    for (i, s) in head_stats.iter().enumerate() {
        params.head.bn[i].stats.update(s);
    }

    // Gradients collected in the canonical flat parameter order.
    let mut flat_grads = Vec::new();
    for binding in &route_bindings {
        for fel in &binding.layers {
            for node in [fel.weight, fel.bias, fel.gamma, fel.beta] {
                flat_grads.push(grads.get(node));
            }
        }
    }
    for node in [
        head_binding.fc_weight[0],
        head_binding.fc_bias[0],
        head_binding.bn_gamma[0],
        head_binding.bn_beta[0],
        head_binding.fc_weight[1],
        head_binding.fc_bias[1],
        head_binding.bn_gamma[1],
        head_binding.bn_beta[1],
        head_binding.fc_weight[2],
        head_binding.fc_bias[2],
    ] {
        flat_grads.push(grads.get(node));
    }

    let mut flat_params = params.flat_params_mut();
    optimizer.step(&mut flat_params, &flat_grads)?;

    Ok((loss_value, correct))
}

fn route_mut(params: &mut NetworkParams, index: usize) -> &mut crate::network::RouteParams {
    match &mut params.routes {
        Routes::Late { geometry, color } => {
            if index == 0 {
                geometry
            } else {
                color
            }
        }
        Routes::Early { fused } => fused,
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

fn accuracy(params: &NetworkParams, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for cloud in &ds.clouds {
        let logits = crate::network::classify(cloud, params)?;
        if argmax(&logits) == cloud.label().expect("labeled") {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Accuracy, macro-averaged one-vs-rest AUC from softmax scores, per-class
/// counts, and the confusion matrix. Deterministic and independent of
/// dataset order. Classes absent from the dataset are excluded from the
/// AUC average with a warning.
pub fn evaluate(params: &NetworkParams, dataset: &LabeledDataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Empty {
            context: "evaluate",
        });
    }
    let c = dataset.class_count;
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(dataset.len());
    let mut labels: Vec<usize> = Vec::with_capacity(dataset.len());
    let mut confusion = vec![vec![0usize; c]; c];
    let mut per_class_counts = vec![0usize; c];
    let mut correct = 0usize;

    for cloud in &dataset.clouds {
        let label = cloud.label().expect("labeled dataset");
        let logits = crate::network::classify(cloud, params)?;
        let probs = softmax(&logits);
        let pred = argmax(&probs);
        if pred == label {
            correct += 1;
        }
        confusion[label][pred] += 1;
        per_class_counts[label] += 1;
        scores.push(probs);
        labels.push(label);
    }

    let mut auc_sum = 0.0;
    let mut auc_classes = 0usize;
    for class in 0..c {
        let n_pos = per_class_counts[class];
        let n_neg = dataset.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            log::warn!("class {class} has no positives or no negatives; excluded from AUC");
            continue;
        }
        auc_sum += auc_one_vs_rest(&scores, &labels, class);
        auc_classes += 1;
    }
    let multiclass_auc = if auc_classes > 0 {
        auc_sum / auc_classes as f64
    } else {
        0.0
    };

    Ok(EvalReport {
        accuracy: correct as f64 / dataset.len() as f64,
        multiclass_auc,
        per_class_counts,
        confusion,
    })
}

/// Mann-Whitney AUC with average ranks for ties.
fn auc_one_vs_rest(scores: &[Vec<f64>], labels: &[usize], class: usize) -> f64 {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        scores[a][class]
            .partial_cmp(&scores[b][class])
            .expect("finite scores")
    });
    let mut rank_sum_pos = 0.0;
    let mut n_pos = 0usize;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]][class] == scores[idx[i]][class] {
            j += 1;
        }
        // Average 1-based rank of the tie run [i, j].
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] == class {
                rank_sum_pos += avg_rank;
                n_pos += 1;
            }
        }
        i = j + 1;
    }
    let n_neg = n - n_pos;
    (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use crate::pointcloud::{generate_synthetic_dataset, SyntheticConfig};

    fn toy_dataset(classes: usize, per_class: usize, points: usize, seed: u64) -> LabeledDataset {
        generate_synthetic_dataset(&SyntheticConfig {
            classes,
            per_class,
            points,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn rebalance_uniform_histogram() {
        // Unbalance the set by keeping only 3 instances of class 0.
        let ds = toy_dataset(3, 10, 16, 1);
        let kept: Vec<_> = ds
            .clouds
            .iter()
            .enumerate()
            .filter(|(i, c)| c.label() != Some(0) || *i < 3)
            .map(|(_, c)| c.clone())
            .collect();
        let unbalanced =
            LabeledDataset::new(kept, 3, ds.class_names.clone(), SplitTag::All).unwrap();
        assert_eq!(unbalanced.class_histogram(), vec![3, 10, 10]);

        let balanced = rebalance(&unbalanced, 6, 42).unwrap();
        assert_eq!(balanced.class_histogram(), vec![6, 6, 6]);
        // Oversampled class members are all drawn from the original 3.
        let originals: Vec<&Matrix> = unbalanced
            .clouds
            .iter()
            .filter(|c| c.label() == Some(0))
            .map(|c| c.positions())
            .collect();
        for cloud in balanced.clouds.iter().filter(|c| c.label() == Some(0)) {
            assert!(originals.iter().any(|o| *o == cloud.positions()));
        }
    }

    #[test]
    fn rebalance_exact_target_keeps_membership() {
        let ds = toy_dataset(2, 5, 16, 2);
        let balanced = rebalance(&ds, 5, 7).unwrap();
        assert_eq!(balanced.len(), ds.len());
        for (a, b) in ds.clouds.iter().zip(&balanced.clouds) {
            assert_eq!(a.positions(), b.positions());
        }
    }

    #[test]
    fn rebalance_undersamples_distinct_instances() {
        let ds = toy_dataset(2, 12, 16, 3);
        let balanced = rebalance(&ds, 4, 0).unwrap();
        assert_eq!(balanced.class_histogram(), vec![4, 4]);
        let class0: Vec<_> = balanced
            .clouds
            .iter()
            .filter(|c| c.label() == Some(0))
            .collect();
        for i in 0..class0.len() {
            for j in i + 1..class0.len() {
                assert_ne!(class0[i].positions(), class0[j].positions());
            }
        }
    }

    #[test]
    fn toy_two_class_training_separates() {
        // Distinct solid colors make the classes separable by the color
        // route alone; within 10 epochs the trained model must classify
        // the whole toy set perfectly.
        let ds = toy_dataset(2, 24, 64, 4);
        let mut net = NetworkConfig::desk(2);
        net.layer_widths = [6, 8, 8, 12];
        net.head_widths = [16, 8];
        net.seed = 1;
        let config = TrainConfig {
            epochs: 10,
            batch_size: 8,
            rebalance_target: 24,
            val_fraction: 0.2,
            seed: 5,
            ..TrainConfig::default()
        };
        let report = train(&ds, &net, &config).unwrap();
        let eval = evaluate(&report.params, &ds).unwrap();
        assert_eq!(
            eval.accuracy,
            1.0,
            "toy set not separated; per-epoch in-batch accuracy: {:?}",
            report.trace.iter().map(|e| e.train_acc).collect::<Vec<_>>()
        );
        for e in &report.trace {
            assert!(e.train_loss.is_finite());
        }
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let ds = toy_dataset(2, 6, 32, 6);
        let mut net = NetworkConfig::desk(2);
        net.layer_widths = [4, 6, 6, 8];
        net.head_widths = [8, 8];
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            rebalance_target: 6,
            val_fraction: 0.2,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(&ds, &net, &config).unwrap();
        let b = train(&ds, &net, &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace.len(), b.trace.len());
    }

    #[test]
    fn evaluate_perfect_and_chance() {
        // A perfect predictor scores accuracy 1 and AUC 1; uniform-random
        // scores on balanced 2-class data sit near AUC 0.5. Exercise the
        // metric directly on synthetic score tables.
        let n = 1000;
        let mut labels = Vec::with_capacity(n);
        let mut perfect = Vec::with_capacity(n);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        use rand::Rng;
        let mut random = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            labels.push(label);
            perfect.push(if label == 0 {
                vec![0.9, 0.1]
            } else {
                vec![0.2, 0.8]
            });
            let s: f64 = rng.random_range(0.0..1.0);
            random.push(vec![s, 1.0 - s]);
        }
        assert_eq!(auc_one_vs_rest(&perfect, &labels, 0), 1.0);
        assert_eq!(auc_one_vs_rest(&perfect, &labels, 1), 1.0);
        let chance = auc_one_vs_rest(&random, &labels, 0);
        assert!((chance - 0.5).abs() < 0.05, "chance AUC {chance}");
    }

    #[test]
    fn auc_average_ranks_for_ties() {
        // Two positives and two negatives all tied: AUC must be exactly 0.5.
        let scores = vec![vec![0.5], vec![0.5], vec![0.5], vec![0.5]];
        let labels = vec![0, 1, 0, 1];
        assert_eq!(auc_one_vs_rest(&scores, &labels, 0), 0.5);
    }
}
