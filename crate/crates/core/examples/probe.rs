// Scratch harness for sizing the desk-scale experiment. Not part of the API.

use std::time::Instant;

use mixquant::data::gaussian_blobs;
use mixquant::nn::{build_mlp, Mode, MlpConfig, QuantScheme};
use mixquant::quantize::FixPParams;
use mixquant::sensitivity::{compute_all_sensitivities, select_layers, SelectOptions};
use mixquant::train::{accumulate_weight_gradients, evaluate, train, TrainConfig};

fn main() {
    let noise: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.55);
    let hidden_alpha: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    for seed in [0u64, 1, 2] {
        run(seed, noise, hidden_alpha);
    }
}

fn run(seed: u64, noise: f64, hidden_alpha: f64) {
    let t0 = Instant::now();
    let data = gaussian_blobs(5000, 64, 10, noise, 100 + seed);
    let (train_set, val_set) = data.split(0.2, 7).unwrap();

    let mut model = build_mlp(&MlpConfig {
        features: 64,
        hidden: vec![256, 128],
        classes: 10,
        seed,
        input_alpha: 1.0,
        hidden_alpha,
    });
    let fp_cfg = TrainConfig { epochs: 12, seed, lr_max: 2e-3, ..Default::default() };
    let hist = train(&mut model, &train_set, Some(&val_set), &fp_cfg, Mode::Fp32).unwrap();
    let fp32_acc = hist.last().unwrap().val_acc;
    let t_fp = t0.elapsed();

    // Sensitivity on the fp32 model.
    let grads = accumulate_weight_gradients(&model, &train_set, 128, None).unwrap();
    let layers: Vec<(String, &[f64], &[f64])> = model
        .quantizable_layers()
        .into_iter()
        .zip(&grads)
        .map(|((id, w), (gid, g))| {
            assert_eq!(id, gid);
            (id.to_string(), w.data(), g.as_slice())
        })
        .collect();
    let stats = compute_all_sensitivities(&layers, &FixPParams::default()).unwrap();
    for s in &stats {
        println!(
            "  seed {seed} layer {} n={} s_sc4={:.3e} s_sc8={:.3e}",
            s.layer_id, s.n_l, s.s_sc4, s.s_sc8
        );
    }
    let mixed_plan = select_layers(&stats, 0.1, SelectOptions::default());
    let posit_plan =
        select_layers(&stats, 1.0, SelectOptions { skip_nonpositive: false });

    let qat = |plans: Vec<(String, Option<QuantScheme>)>, tag: &str| {
        let mut m = model.clone();
        for (id, scheme) in plans {
            m.set_scheme(&id, scheme).unwrap();
        }
        m.refresh_fixp_scales().unwrap();
        m.snap_weights().unwrap();
        let pre = evaluate(&m, &val_set, Mode::Quantized).unwrap();
        let cfg = TrainConfig { epochs: 8, seed, lr_max: 1e-3, ..Default::default() };
        let h = train(&mut m, &train_set, Some(&val_set), &cfg, Mode::Quantized).unwrap();
        let acc = h.last().unwrap().val_acc;
        println!("  seed {seed} {tag}: pre-snap eval {pre:.4} -> QAT {acc:.4}");
        acc
    };

    let all_ids: Vec<String> = model.quantizable_layers().iter().map(|(id, _)| id.to_string()).collect();
    let fixp_acc = qat(
        all_ids.iter().map(|id| (id.clone(), Some(QuantScheme::FixP4(FixPParams::default())))).collect(),
        "fixp-all",
    );
    let posit_acc = qat(
        all_ids
            .iter()
            .map(|id| {
                let v = posit_plan.variant_for(id).unwrap();
                (id.clone(), Some(QuantScheme::Posit4 { variant: v }))
            })
            .collect(),
        "posit-all",
    );
    let mixed_acc = qat(
        all_ids
            .iter()
            .map(|id| {
                let scheme = match mixed_plan.variant_for(id) {
                    Some(v) => QuantScheme::Posit4 { variant: v },
                    None => QuantScheme::FixP4(FixPParams::default()),
                };
                (id.clone(), Some(scheme))
            })
            .collect(),
        "mixed",
    );

    println!(
        "seed {seed} noise {noise} alpha {hidden_alpha}: fp32 {fp32_acc:.4} fixp {fixp_acc:.4} posit {posit_acc:.4} mixed {mixed_acc:.4} (mixed-fixp {:+.4}) posit_frac {:.3} [{:?} fp32-train, total {:?}]",
        mixed_acc - fixp_acc,
        mixed_plan.posit_param_fraction(),
        t_fp,
        t0.elapsed()
    );
}
