use hetsim_core::encoder::{forward, AugmentConfig, EdgeSet, GraphView, with_self_loops};
use hetsim_core::graph::MetapathSpec;
use hetsim_core::noise::{inject_error_links, NoiseConfig};
use hetsim_core::synthesizer::{synthesize, KnnSelection, SynthesizerKind};
use hetsim_core::synthetic::{generate, SyntheticConfig};
use hetsim_core::tape::Tape;
use hetsim_core::tensor::Tensor;
use hetsim_core::training::*;

#[test]
fn branch_quality_after_training() {
    let mut g: hetsim_core::graph::HeteroGraph<f64> = generate(&SyntheticConfig {
        n_target: 800, n_aux: vec![200, 200], classes: 4,
        intra_class_link_prob: 0.05, inter_class_link_prob: 0.0,
        feature_dim: 8, feature_noise: 0.5, seed: 0, train_frac: 0.3, val_frac: 0.1,
    });
    g.apply_regime(hetsim_core::graph::FeatureRegime::OneHot);
    let (noised, _) = inject_error_links(&g, &NoiseConfig { ratio: 0.3, seed: 100 }).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3, weight_decay: 1e-3, epochs: 150, patience: 40, gamma: 2.0,
        metapaths: vec![MetapathSpec::new(vec![0, 1]), MetapathSpec::new(vec![2, 3])],
        ablation: Ablation::Full,
        contrastive: ContrastiveMode::RowWise,
        augment: AugmentConfig { p_noised: 0.3, p_synth: 0.4, seed: 200 },
        selection: KnnSelection::Exact,
    };
    let mut model = ModelParams::init(&noised, 32, SynthesizerKind::Gcn, 15,
        hetsim_core::encoder::EncoderConfig { layers: 2, heads: 2, hidden: 32, ..Default::default() },
        300).unwrap();
    let report = train(&noised, &cfg, &mut model).unwrap();
    println!("best epoch {} of {}", report.best_epoch, report.epochs_run);

    let ctx = TrainContext::new(&noised, &cfg, SynthesizerKind::Gcn).unwrap();

    // Noised branch (standard inference).
    let probs = infer_probs(&ctx, &model).unwrap();
    let m = evaluate(&probs, &noised.labels, &noised.splits.test, "test").unwrap();
    println!("noised branch test macro {:.4}", m.macro_f1);

    // Synth branch inference (p = 0).
    let mut tape = Tape::<f64>::new();
    let proj_ids = model.projection.register(&mut tape);
    let synth_ids = model.synthesizer.register(&mut tape);
    let enc_ids = model.encoder.register(&mut tape);
    let head_ids = model.head.register(&mut tape);
    let s = synthesize(&mut tape, &noised, &model.projection, &proj_ids, &model.synthesizer,
        &synth_ids, ctx.propagation.as_ref(), 0.01, KnnSelection::Exact, None).unwrap();
    let eye = tape.constant(Tensor::eye(noised.n_nodes()));
    let wid = tape.add(s.a_theta, eye).unwrap();
    let pattern = s.mask.clone();
    let edges = EdgeSet::from_adjacency(&pattern);
    let view = GraphView { weight_matrix: wid, edges: &edges };
    let (h, _) = forward(&mut tape, s.z, &view, None, &model.encoder, &enc_ids).unwrap();
    let preds = predict_heads(&mut tape, h, None, &head_ids, &ctx.target_nodes, false).unwrap();
    let synth_probs = tape.value(preds.noised).clone();
    let ms = evaluate(&synth_probs, &noised.labels, &noised.splits.test, "test").unwrap();
    println!("synth branch test macro {:.4}", ms.macro_f1);

    // Train-split quality of each branch.
    let mt = evaluate(&probs, &noised.labels, &noised.splits.train, "train").unwrap();
    let mts = evaluate(&synth_probs, &noised.labels, &noised.splits.train, "train").unwrap();
    println!("train acc: noised {:.4} synth {:.4}", mt.micro_f1, mts.micro_f1);


}
