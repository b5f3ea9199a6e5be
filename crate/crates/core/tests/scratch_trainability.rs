// Scratch experiments for pipeline tuning. Deleted once the acceptance
// suite is in place.

use forge_core::adaptor::{gate, train_anchor_head, GateConfig, OptimizerConfig};
use forge_core::operator::{build_drift_operator, default_layer_blocks, single_head_operator};
use forge_core::panel::AnchorPanel;
use forge_core::synth::{generate, SynthConfig};
use rand::seq::SliceRandom;

fn operator_panel(panel: &AnchorPanel, feats: nalgebra::DMatrix<f64>) -> AnchorPanel {
    AnchorPanel::new(
        feats,
        panel.donor.clone(),
        panel.tissue.clone(),
        panel.branch.clone(),
        panel.stage.clone(),
        panel.stage_depth.clone(),
        panel.stage_names().to_vec(),
        panel.stage_distances().clone(),
    )
    .unwrap()
}

#[test]
fn probe_gates_and_invariant() {
    // --- A1 shape: drift head on the default config ---
    let data = generate(&SynthConfig::default()).unwrap();
    let (e, m, l) = default_layer_blocks(data.tensor.n_layers());
    let drift = build_drift_operator(&data.tensor, e, m, l).unwrap();
    let t0 = std::time::Instant::now();
    let feats = drift.apply(&data.internal_anchors.features).unwrap();
    let train_panel = operator_panel(&data.internal_anchors, feats);
    let head = train_anchor_head(&train_panel, 8, 0.05, 42, &OptimizerConfig::default()).unwrap();
    let report = gate(&head, &train_panel, &GateConfig { seed: 7, ..Default::default() }).unwrap();
    println!(
        "A1 drift internal: trust={:.3} corr=({:.3},{:.3},{:.3}) p={:.4} passed={} [{:?}]",
        report.trustworthiness,
        report.corr_random,
        report.corr_donor,
        report.corr_clade,
        report.blocked_p,
        report.passed,
        t0.elapsed()
    );

    // external transfer gating
    let ext_feats = drift.apply(&data.external_anchors.features).unwrap();
    let ext_panel = operator_panel(&data.external_anchors, ext_feats);
    let ext_report = gate(&head, &ext_panel, &GateConfig { seed: 8, ..Default::default() }).unwrap();
    println!(
        "A1 drift external: trust={:.3} corr=({:.3},{:.3},{:.3}) p={:.4} passed={}",
        ext_report.trustworthiness,
        ext_report.corr_random,
        ext_report.corr_donor,
        ext_report.corr_clade,
        ext_report.blocked_p,
        ext_report.passed,
    );

    // --- A4 shape: planted single-head vs drift trustworthiness ---
    let sh = single_head_operator(&data.tensor, 0, 0).unwrap();
    let sh_feats = sh.apply(&data.internal_anchors.features).unwrap();
    let sh_panel = operator_panel(&data.internal_anchors, sh_feats);
    let sh_head = train_anchor_head(&sh_panel, 8, 0.05, 42, &OptimizerConfig::default()).unwrap();
    let sh_report = gate(&sh_head, &sh_panel, &GateConfig { seed: 7, ..Default::default() }).unwrap();
    println!(
        "A4 single-head: trust={:.3} vs drift {:.3}; passed={}",
        sh_report.trustworthiness, report.trustworthiness, sh_report.passed
    );

    // --- synth invariant: 2-branch tree, noise 0, planted head, <= 1e-3 ---
    let cfg = SynthConfig {
        n_branches: 2,
        noise_sigma: 0.0,
        ..Default::default()
    };
    let data2 = generate(&cfg).unwrap();
    let sh2 = single_head_operator(&data2.tensor, 0, 0).unwrap();
    let f2 = sh2.apply(&data2.internal_anchors.features).unwrap();
    let p2 = operator_panel(&data2.internal_anchors, f2);
    let head2 = train_anchor_head(&p2, 8, 0.0, 42, &OptimizerConfig::default()).unwrap();
    let norm2: f64 = p2.d_target_matrix().iter().map(|v| v * v).sum();
    println!(
        "invariant: rel dist loss = {:.3e} (target 1e-3)",
        head2.train.final_distance_loss / norm2
    );

    // 3-branch comparison (curvature obstruction)
    let cfg3 = SynthConfig {
        noise_sigma: 0.0,
        ..Default::default()
    };
    let data3 = generate(&cfg3).unwrap();
    let sh3 = single_head_operator(&data3.tensor, 0, 0).unwrap();
    let f3 = sh3.apply(&data3.internal_anchors.features).unwrap();
    let p3 = operator_panel(&data3.internal_anchors, f3);
    let head3 = train_anchor_head(&p3, 8, 0.0, 42, &OptimizerConfig::default()).unwrap();
    let norm3: f64 = p3.d_target_matrix().iter().map(|v| v * v).sum();
    println!(
        "3-branch: rel dist loss = {:.3e}",
        head3.train.final_distance_loss / norm3
    );

    // --- A2 shape: label-shuffled panel should fail blocked permutation ---
    let mut fails = 0;
    for seed in 0..6u64 {
        let mut perm: Vec<usize> = (0..train_panel.n_rows()).collect();
        perm.shuffle(&mut forge_core::rng::stream(seed, "a2-shuffle", 0));
        let shuffled = train_panel.shuffle_labels(&perm).unwrap();
        let h = train_anchor_head(&shuffled, 8, 0.05, seed, &OptimizerConfig::default()).unwrap();
        let r = gate(
            &h,
            &shuffled,
            &GateConfig { seed, n_perm: 199, ..Default::default() },
        )
        .unwrap();
        if r.blocked_p > 0.05 {
            fails += 1;
        }
        println!("A2 seed {seed}: blocked_p={:.4} trust={:.3}", r.blocked_p, r.trustworthiness);
    }
    println!("A2: {fails}/6 shuffled panels fail gates (want most)");

    panic!("probe only");
}
