//! Scratch calibration rig (run explicitly with --ignored).

use hsivessel::data::{make_source_phantom, make_target_phantom, PhantomSpec};
use hsivessel::metrics::{confusion, dice_score};
use hsivessel::models::{predict_probs, FadaDiscriminator, SegNet, SegNetConfig};
use hsivessel::reduce::{window_500_600, window_median};
use hsivessel::train::{
    pretrain, train_fada, LossKind, SourceSample, Stage, TrainConfig,
};
use ndarray::Array3;

struct Data {
    source: Vec<SourceSample>,
    target_imgs: Vec<Array3<f32>>,
    target_masks: Vec<hsivessel::data::Mask>,
}

fn build_data(seed: u64, n_src: usize, n_tgt: usize) -> Data {
    let base = PhantomSpec { height: 64, width: 64, n_bands: 32, ..PhantomSpec::default() };
    let source: Vec<SourceSample> = (0..n_src)
        .map(|i| {
            let spec = PhantomSpec { seed: seed * 1000 + i as u64, ..base.clone() };
            let (img, mask) = make_source_phantom(&spec).unwrap();
            SourceSample { image: img.data().clone(), mask: mask.to_f32(), id: format!("s{i}") }
        })
        .collect();
    let mut target_imgs = Vec::new();
    let mut target_masks = Vec::new();
    for i in 0..n_tgt {
        let spec = PhantomSpec { seed: seed * 2000 + 500 + i as u64, ..base.clone() };
        let (cube, mask) = make_target_phantom(&spec).unwrap();
        target_imgs.push(window_median(&cube, &window_500_600()).unwrap().into_data());
        target_masks.push(mask);
    }
    Data { source, target_imgs, target_masks }
}

fn target_dice(net: &SegNet, data: &Data) -> f64 {
    let mut dices = Vec::new();
    for (img, mask) in data.target_imgs.iter().zip(data.target_masks.iter()) {
        let probs = predict_probs(net, img).unwrap();
        let pred = hsivessel::losses::threshold_probs(&probs, 0.5);
        dices.push(dice_score(&confusion(&pred, mask).unwrap()));
    }
    dices.iter().sum::<f64>() / dices.len() as f64
}

fn pred_coverage(net: &SegNet, data: &Data) -> f64 {
    let mut cov = 0.0;
    for img in &data.target_imgs {
        let probs = predict_probs(net, img).unwrap();
        let pred = hsivessel::losses::threshold_probs(&probs, 0.5);
        cov += pred.coverage();
    }
    cov / data.target_imgs.len() as f64
}

#[test]
#[ignore]
fn calibrate_fada() {
    let data = build_data(7, 20, 8);
    let combos: &[(f64, f64, f64, usize, usize)] = &[
        // (adv_weight, lr_seg_fada, lr_disc, pretrain_steps, fada_steps)
        (0.1, 1e-3, 1e-3, 300, 200),
        (0.5, 1e-3, 1e-3, 300, 200),
        (1.0, 1e-3, 2e-3, 300, 200),
        (0.5, 3e-4, 2e-3, 300, 200),
        (0.5, 1e-3, 2e-3, 120, 200),
        (1.0, 3e-4, 2e-3, 120, 200),
    ];
    for &(adv, lr_seg, lr_disc, pre_steps, fada_steps) in combos {
        let mut net = SegNet::new(SegNetConfig::desk_default(1), 42).unwrap();
        let pre_cfg = TrainConfig {
            stage: Stage::Pretrain,
            steps: pre_steps,
            lr_seg: 1e-3,
            batch_size: 4,
            loss: LossKind::Dice,
            seed: 11,
            ..TrainConfig::default()
        };
        pretrain(&mut net, &data.source, &pre_cfg).unwrap();
        let base_dice = target_dice(&net, &data);
        let base_cov = pred_coverage(&net, &data);

        let mut disc = FadaDiscriminator::new(net.feature_channels(), 2, 43);
        let cfg = TrainConfig {
            stage: Stage::Fada,
            steps: fada_steps,
            lr_seg,
            lr_disc,
            adv_weight: adv,
            batch_size: 4,
            seed: 12,
            ..TrainConfig::default()
        };
        let log = train_fada(&mut net, &mut disc, &data.source, &data.target_imgs, &cfg).unwrap();
        let fada_dice = target_dice(&net, &data);
        let fada_cov = pred_coverage(&net, &data);
        let d_last: f32 = log.records[fada_steps - 10..].iter().map(|r| r.disc_loss).sum::<f32>() / 10.0;
        let a_last: f32 = log.records[fada_steps - 10..].iter().map(|r| r.adv_loss).sum::<f32>() / 10.0;
        println!(
            "adv={adv} lr_seg={lr_seg} lr_disc={lr_disc} pre={pre_steps}: base dice {base_dice:.3} (cov {base_cov:.3}) -> fada dice {fada_dice:.3} (cov {fada_cov:.3}) | disc {d_last:.3} adv {a_last:.3}"
        );
    }
}
