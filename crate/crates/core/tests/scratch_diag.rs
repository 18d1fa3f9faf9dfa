use hetsim_core::encoder::AugmentConfig;
use hetsim_core::graph::MetapathSpec;
use hetsim_core::graph::{homogeneity_score, target_subgraph, Labels};
use hetsim_core::noise::{inject_error_links, NoiseConfig};
use hetsim_core::synthesizer::{synthesize, KnnSelection, SynthesizerKind};
use hetsim_core::synthetic::{generate, SyntheticConfig};
use hetsim_core::tape::Tape;
use hetsim_core::training::{Ablation, ModelParams, TrainConfig, TrainContext};

#[test]
fn beta_at_init() {
    let mut g: hetsim_core::graph::HeteroGraph<f64> = generate(&SyntheticConfig {
        n_target: 800,
        n_aux: vec![200, 200],
        classes: 4,
        intra_class_link_prob: 0.05,
        inter_class_link_prob: 0.0,
        feature_dim: 8,
        feature_noise: 0.5,
        seed: 0,
        train_frac: 0.3,
        val_frac: 0.1,
    });
    g.apply_regime(hetsim_core::graph::FeatureRegime::OneHot);
    let (noised, _) = inject_error_links(&g, &NoiseConfig { ratio: 0.3, seed: 100 }).unwrap();
    let model = ModelParams::init(
        &noised, 32, SynthesizerKind::Gcn, 10,
        hetsim_core::encoder::EncoderConfig { layers: 2, heads: 2, hidden: 32, ..Default::default() },
        300,
    ).unwrap();
    let cfg = TrainConfig {
        lr: 5e-3, weight_decay: 1e-5, epochs: 1, patience: 1, gamma: 2.0,
        metapaths: vec![MetapathSpec::new(vec![0,1])],
        ablation: Ablation::Full,
        contrastive: hetsim_core::training::ContrastiveMode::RowWise,
        augment: AugmentConfig { p_noised: 0.0, p_synth: 0.0, seed: 0 },
        selection: KnnSelection::Exact,
    };
    let ctx = TrainContext::new(&noised, &cfg, SynthesizerKind::Gcn).unwrap();
    let mut tape = Tape::<f64>::new();
    let proj_ids = model.projection.register(&mut tape);
    let synth_ids = model.synthesizer.register(&mut tape);
    let s = synthesize(&mut tape, &noised, &model.projection, &proj_ids, &model.synthesizer,
        &synth_ids, ctx.propagation.as_ref(), 0.01, KnnSelection::Exact, None).unwrap();
    let a_theta = tape.value(s.a_theta).clone();
    let block = target_subgraph(&a_theta, &noised).unwrap();
    let binary = block.map(|v| if v != 0.0 { 1.0 } else { 0.0 });
    let labels: Vec<usize> = match &noised.labels {
        Labels::Single { of, .. } => of.iter().map(|l| l.unwrap()).collect(),
        _ => unreachable!(),
    };
    let beta = homogeneity_score(&binary, &labels).unwrap();
    let range = noised.target_range();
    let mut target_nbrs = 0usize;
    let mut total = 0usize;
    for i in range.clone() {
        for j in 0..noised.n_nodes() {
            if a_theta.get(i, j) != 0.0 {
                total += 1;
                if range.contains(&j) { target_nbrs += 1; }
            }
        }
    }
    println!("beta(A_hat_theta at init) = {beta:.4}");
    println!("target rows: {} of {} kept neighbors are targets", target_nbrs, total);
    let vals: Vec<f64> = a_theta.values().iter().copied().filter(|&v| v != 0.0).collect();
    let mn = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    println!("kept similarity values: min {mn:.4} max {mx:.4} mean {mean:.4}");
}
