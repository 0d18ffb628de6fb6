use pcstyle::network::{extract_representations, NetworkConfig, RouteSel};
use pcstyle::numerics::GramNorm;
use pcstyle::pointcloud::{generate_synthetic_dataset, SyntheticConfig};
use pcstyle::training::{train, TrainConfig};
use pcstyle::transfer::{preset, stylize, style_loss, StyleSource, UpdateMask};

#[test]
fn diag_style_floor() {
    let dataset = generate_synthetic_dataset(&SyntheticConfig {
        classes: 4, per_class: 16, points: 256, seed: 77,
    }).unwrap();
    let mut net = NetworkConfig::desk(4);
    net.seed = 7;
    let config = TrainConfig {
        epochs: 12, batch_size: 8, rebalance_target: 16, val_fraction: 0.2,
        early_stop_val_acc: Some(0.95), seed: 9, ..TrainConfig::default()
    };
    let params = train(&dataset, &net, &config).unwrap().params;

    let cloud = |points: usize, class: usize, seed: u64| {
        generate_synthetic_dataset(&SyntheticConfig { classes: 4, per_class: 1, points, seed })
            .unwrap().clouds[class].clone()
    };
    let content = cloud(512, 0, 102);
    let style = cloud(256, 2, 202);

    // Feature/Gram scales of the two clouds at layer 1 of the color route.
    for (name, c) in [("content", &content), ("style", &style)] {
        let reps = extract_representations(
            c.colors(), &params, RouteSel::Color, &[1], &[1], GramNorm::PerPoint,
        ).unwrap();
        let f = &reps.content[0].1;
        let g = &reps.style[0].1;
        let fmax = f.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gmax = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        eprintln!("{name}: |F|max {fmax:.3} |G|max {gmax:.3} Gdiag {:?}",
            (0..g.rows()).map(|i| (g[(i,i)]*100.0).round()/100.0).collect::<Vec<_>>());
    }
    let rp = extract_representations(content.colors(), &params, RouteSel::Color, &[], &[1], GramNorm::PerPoint).unwrap();
    let rs = extract_representations(style.colors(), &params, RouteSel::Color, &[], &[1], GramNorm::PerPoint).unwrap();
    eprintln!("style loss at init: {:.4}", style_loss(&rp, &rs, &[1]).unwrap());

    // Pure style optimization, long run, gaussian and content inits.
    for (label, init) in [("content-init", "content"), ("gaussian-init", "gaussian")] {
        let mut cfg = preset("pc-to-pc").unwrap();
        cfg.update_mask = UpdateMask::Color;
        cfg.alpha_color = 0.0;
        cfg.beta_color = 1.0;
        cfg.init = init.parse().unwrap();
        cfg.steps = 4000;
        cfg.trace_every = 500;
        let res = stylize(&content, StyleSource::Cloud(&style), &params, &cfg).unwrap();
        let first = res.trace.first().unwrap();
        let last = res.trace.last().unwrap();
        eprintln!("{label}: pure style loss {:.4} -> {:.4}", first.style_loss_color, last.style_loss_color);
    }
}
