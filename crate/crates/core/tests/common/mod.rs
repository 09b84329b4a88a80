//! Independent reference implementations and the shared synthetic pipeline.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use cbhir_core::checkpoint;
use cbhir_core::data::{split, synth_generate, Label, Split};
use cbhir_core::eval::{evaluate, uncertain_query_report};
use cbhir_core::network::NetworkConfig;
use cbhir_core::store::index_build;
use cbhir_core::train::{train_with_observer, TrainEvent};
use cbhir_core::{FeatureStore, MetricsReport, Network, PatchRecord, TrainConfig, TrainReport, UncertainReport};

/// Direct cross-correlation over an explicitly zero-padded copy of the input.
pub fn naive_conv(
    x: &[f64],
    (h, w, c): (usize, usize, usize),
    k: &[f64],
    (kh, kw, f): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; ph * pw * c];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                padded[((i + pad) * pw + j + pad) * c + ch] = x[(i * w + j) * c + ch];
            }
        }
    }
    let oh = (ph - kh) / stride + 1;
    let ow = (pw - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * f];
    for oi in 0..oh {
        for oj in 0..ow {
            for fi in 0..f {
                let mut s = bias[fi];
                for a in 0..kh {
                    for b in 0..kw {
                        for ch in 0..c {
                            let xv = padded[((oi * stride + a) * pw + oj * stride + b) * c + ch];
                            s += xv * k[((a * kw + b) * c + ch) * f + fi];
                        }
                    }
                }
                out[(oi * ow + oj) * f + fi] = s;
            }
        }
    }
    (out, oh, ow)
}

pub fn naive_max_pool(x: &[f64], (h, w, c): (usize, usize, usize), window: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::new();
    for oi in 0..oh {
        for oj in 0..ow {
            for ch in 0..c {
                let mut m = f64::NEG_INFINITY;
                for a in 0..window {
                    for b in 0..window {
                        m = m.max(x[((oi * stride + a) * w + oj * stride + b) * c + ch]);
                    }
                }
                out.push(m);
            }
        }
    }
    (out, oh, ow)
}

pub fn naive_gmp(x: &[f64], c: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| x.iter().skip(ch).step_by(c).fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
        .collect()
}

/// Full sort of every record by `(distance, id)`.
pub fn brute_force_knn(records: &[(String, Vec<f64>)], q: &[f64], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = records
        .iter()
        .map(|(id, v)| {
            let d2: f64 = v.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            (id.clone(), d2.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Grad-CAM for `conv (valid, stride 1) -> relu -> global max pool`, written
/// out from the chain rule: only the argmax cell of each channel receives
/// `ds/df_k = -2 (f_q[k] - f_r[k])`, so `alpha_k` is that value over the area.
pub fn single_conv_grad_cam(
    q: &[f64],
    r: &[f64],
    dims: (usize, usize, usize),
    k: &[f64],
    kdims: (usize, usize, usize),
    bias: &[f64],
) -> (Vec<f64>, usize, usize) {
    let f = kdims.2;
    let act = |x: &[f64]| {
        let (z, oh, ow) = naive_conv(x, dims, k, kdims, bias, 1, 0);
        (z.into_iter().map(|v| v.max(0.0)).collect::<Vec<_>>(), oh, ow)
    };
    let (aq, oh, ow) = act(q);
    let (ar, _, _) = act(r);
    let fq = naive_gmp(&aq, f);
    let fr = naive_gmp(&ar, f);
    let area = (oh * ow) as f64;
    let alpha: Vec<f64> = (0..f).map(|ch| -2.0 * (fq[ch] - fr[ch]) / area).collect();
    let map = (0..oh * ow)
        .map(|p| (0..f).map(|ch| alpha[ch] * aq[p * f + ch]).sum::<f64>().max(0.0))
        .collect();
    (map, oh, ow)
}

/// Mean absolute difference between horizontally and vertically adjacent
/// pixels of the channel mean.
pub fn gradient_energy(r: &PatchRecord) -> f64 {
    let [h, w, c] = [r.pixels.shape()[0], r.pixels.shape()[1], r.pixels.shape()[2]];
    let g: Vec<f64> = r.pixels.data().chunks(c).map(|px| px.iter().sum::<f64>() / c as f64).collect();
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                total += (g[i * w + j] - g[i * w + j + 1]).abs();
                n += 1;
            }
            if i + 1 < h {
                total += (g[i * w + j] - g[(i + 1) * w + j]).abs();
                n += 1;
            }
        }
    }
    total / n as f64
}

pub struct PipelineRun {
    pub network: Network,
    pub store: FeatureStore,
    pub train_report: TrainReport,
    pub metrics: Vec<MetricsReport>,
    pub uncertain: UncertainReport,
    pub uncertain_in_batches: usize,
    pub batches_seen: usize,
    pub elapsed: Duration,
}

pub const SYNTH_SEED: u64 = 42;

/// Synthetic data, desk preset at 32x32, default training except the epoch
/// count; writes the checkpoint and store into `out`.
pub fn synthetic_pipeline(n_per_class: usize, epochs: usize, out: &Path) -> PipelineRun {
    let start = Instant::now();
    let records = synth_generate::<f64>(n_per_class, (32, 32), SYNTH_SEED).unwrap();
    let (labeled, uncertain): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| !r.label.is_uncertain());
    let mut all = split(labeled, 0.7, SYNTH_SEED).unwrap();
    all.extend(uncertain.iter().cloned());

    let net_cfg = NetworkConfig::desk().with_input_size(32, 32);
    let cfg = TrainConfig {
        epochs,
        seed: SYNTH_SEED,
        ..TrainConfig::default()
    };
    let mut uncertain_in_batches = 0;
    let mut batches_seen = 0;
    let (network, train_report) = train_with_observer(&all, &net_cfg, &cfg, |ev| {
        if let TrainEvent::Batch { batch, records, .. } = ev {
            batches_seen += 1;
            uncertain_in_batches += batch
                .pairs
                .iter()
                .filter(|p| records[p.anchor].label.is_uncertain() || records[p.partner].label.is_uncertain())
                .count();
        }
        Ok(())
    })
    .unwrap();

    let ckpt_path = out.join("model.ckpt");
    let meta = BTreeMap::from([("split_seed".to_string(), serde_json::json!(SYNTH_SEED))]);
    checkpoint::save(&network, &meta, &ckpt_path).unwrap();

    let train_set: Vec<PatchRecord> = all.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let test_set: Vec<PatchRecord> = all.iter().filter(|r| r.split == Split::Test).cloned().collect();
    let mut store = index_build(&network, &train_set).unwrap();
    store.set_checkpoint("model.ckpt");
    store.save(&out.join("store.jsonl")).unwrap();

    let (_, metrics) = evaluate(&network, &store, &test_set, &[1, 3, 5]).unwrap();
    let uncertain = uncertain_query_report(&store, &network, &uncertain, 5).unwrap();
    assert!(uncertain.per_query.iter().all(|r| r.suggested_label != Label::Uncertain));

    PipelineRun {
        network,
        store,
        train_report,
        metrics,
        uncertain,
        uncertain_in_batches,
        batches_seen,
        elapsed: start.elapsed(),
    }
}
