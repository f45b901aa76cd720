use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dermvit::backbone::{self, ImageTensor};
use dermvit::data::{self, CutBox};
use dermvit::fusion::{self, FusionWeights, HeadFeatures};
use dermvit::lesion;
use dermvit::metrics;
use dermvit::model::{self, ModelWeights};
use dermvit::optim::{self, OptimizerState, SgdConfig};
use dermvit::params::{LayerNorm, Parameters, RandomInit};
use dermvit::tensor::LN_EPS;
use dermvit::{ModelConfig, NormMode};

fn tiny() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        patch_size: 4,
        embed_dim: 16,
        fusion_dim: 16,
        backbone_layers: 2,
        head_layers: 1,
        num_heads: 2,
        select_k: 4,
        ..ModelConfig::desk()
    }
}

fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(h, w, (0..h * w * 3).map(|_| r.random::<f32>()).collect()).unwrap()
}

fn ln(x: &Array2<f64>, gamma: &Array2<f64>, beta: &Array2<f64>) -> Array2<f64> {
    let n = x.ncols() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Array2::from_shape_fn(x.dim(), |(i, j)| {
        (x[[i, j]] - mean) / (var + LN_EPS).sqrt() * gamma[[0, j]] + beta[[0, j]]
    })
}

fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>()) {
        let cfg = tiny();
        let w = ModelWeights::<f64>::init(&cfg, seed).unwrap();
        let pred = model::forward(&random_image(seed, 16, 16), &w).unwrap();
        let all = pred.attention.disease_path().into_iter()
            .chain(&pred.attention.body_part)
            .chain(&pred.attention.attribute);
        for rec in all {
            prop_assert_eq!(rec.num_heads(), cfg.num_heads);
            prop_assert!(rec.max_row_sum_error() < 1e-12);
            prop_assert!(rec.matrices.iter().all(|m| m.iter().all(|&v| v >= 0.0)));
        }
    }

    #[test]
    fn selection_is_a_top_k_of_head_scores(seed in any::<u64>()) {
        let cfg = tiny();
        let w = ModelWeights::<f64>::init(&cfg, seed).unwrap();
        let pred = model::forward(&random_image(seed ^ 1, 16, 16), &w).unwrap();
        let sel = pred.selection_disease.unwrap();
        let scores = lesion::head_scores(&pred.attention.disease).unwrap();
        prop_assert_eq!(&sel.scores, &scores);
        prop_assert_eq!(sel.indices.len(), cfg.select_k);
        let floor = sel.indices.iter().map(|&i| scores[i - 1]).fold(f64::INFINITY, f64::min);
        let above = scores.iter().filter(|&&s| s > floor).count();
        prop_assert!(above < cfg.select_k);
        prop_assert!(sel.indices.iter().all(|&i| (1..=cfg.num_patches()).contains(&i)));
    }

    #[test]
    fn top_k_matches_full_sort(scores in prop::collection::vec(0u8..6, 1..80), k_frac in 0.0f64..1.0) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let k = 1 + ((scores.len() - 1) as f64 * k_frac) as usize;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let want: Vec<usize> = order[..k].iter().map(|i| i + 1).collect();
        prop_assert_eq!(lesion::top_k_indices(&scores, k).unwrap(), want);
    }

    #[test]
    fn cut_box_stays_inside(h in 1usize..80, w in 1usize..80, lambda in 0.0f64..=1.0, cy in 0usize..80, cx in 0usize..80) {
        let (cy, cx) = (cy % h, cx % w);
        let b = CutBox::around(h, w, lambda, cy, cx);
        prop_assert!(b.y0 <= b.y1 && b.y1 <= h && b.x0 <= b.x1 && b.x1 <= w);
        let counted = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| b.contains(y, x)).count();
        prop_assert_eq!(counted, b.area());
        prop_assert_eq!(b.keep_fraction(h, w), 1.0 - counted as f64 / (h * w) as f64);
        let ch = (h as f64 * (1.0 - lambda).sqrt()) as usize;
        let cw = (w as f64 * (1.0 - lambda).sqrt()) as usize;
        prop_assert!(b.y1 - b.y0 <= ch && b.x1 - b.x0 <= cw);
    }

    #[test]
    fn folds_partition_and_stratify(labels in prop::collection::vec(0usize..4, 10..120), k in 2usize..6, seed in any::<u64>()) {
        let folds = data::kfold_split(&labels, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = vec![0; labels.len()];
        for f in &folds {
            prop_assert_eq!(f.train.len() + f.val.len(), labels.len());
            for &i in &f.val {
                seen[i] += 1;
                prop_assert!(!f.train.contains(&i));
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes: Vec<usize> = folds.iter().map(|f| f.val.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for class in 0..4 {
            let per: Vec<usize> = folds.iter().map(|f| f.val.iter().filter(|&&i| labels[i] == class).count()).collect();
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        }
        prop_assert_eq!(&folds, &data::kfold_split(&labels, k, seed).unwrap());
    }

    #[test]
    fn metrics_are_bounded(truth in prop::collection::vec(0usize..5, 1..60), seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<usize> = truth.iter().map(|&t| if r.random_bool(0.6) { t } else { r.random_range(0..5) }).collect();
        let (m, confusion) = metrics::multiclass(&pred, &truth, 5).unwrap();
        for v in [m.precision, m.recall, m.f1, m.accuracy] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        prop_assert_eq!(confusion.iter().flatten().sum::<usize>(), truth.len());
        let (p, _) = metrics::multiclass(&truth, &truth, 5).unwrap();
        prop_assert_eq!((p.f1, p.accuracy), (100.0, 100.0));
    }
}

#[test]
fn sgd_matches_recurrence_for_100_steps() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut ln_w = LayerNorm::<f64>::new(&mut RandomInit(&mut r), 7);
    ln_w.visit_mut("", &mut |_, t| t.mapv_inplace(|_| r.random_range(-1.0..1.0)));
    let cfg = SgdConfig {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 1e-3,
    };
    let mut state = OptimizerState::new(&ln_w, cfg).unwrap();
    let mut p: Vec<Vec<f64>> = ln_w
        .named_tensors()
        .iter()
        .map(|(_, t)| t.iter().copied().collect())
        .collect();
    let mut v: Vec<Vec<f64>> = p.iter().map(|x| vec![0.0; x.len()]).collect();
    for step in 0..100 {
        let grads: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((1, 7), |_| r.random_range(-1.0..1.0)))
            .collect();
        optim::sgd_step(&mut ln_w, &grads, &mut state).unwrap();
        for ((pt, vt), gt) in p.iter_mut().zip(&mut v).zip(&grads) {
            for ((pj, vj), gj) in pt.iter_mut().zip(vt.iter_mut()).zip(gt) {
                let g = gj + cfg.weight_decay * *pj;
                *vj = cfg.momentum * *vj + g;
                *pj -= cfg.lr * *vj;
            }
        }
        let got = ln_w.named_tensors();
        for ((name, t), want) in got.iter().zip(&p) {
            for (a, b) in t.iter().zip(want) {
                assert!((a - b).abs() < 1e-9, "step {step} {name}");
            }
        }
    }
    assert_eq!(state.step_count, 100);
}

#[test]
fn pool_norm_is_layer_norm_of_mean() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let mut norm = LayerNorm::<f64>::new(&mut RandomInit(&mut r), 8);
    norm.visit_mut("", &mut |_, t| t.mapv_inplace(|_| r.random_range(-2.0..2.0)));
    for n in [1, 3, 16] {
        let x = Array2::from_shape_fn((n, 8), |_| r.random_range(-5.0..5.0));
        let mean = x.mean_axis(ndarray::Axis(0)).unwrap().insert_axis(ndarray::Axis(0));
        let got = fusion::pool_norm(&x, &norm, NormMode::Standard).unwrap();
        assert!(max_diff(&got, &ln(&mean, &norm.gamma, &norm.beta)) < 1e-12);
        let raw = fusion::pool_norm(&x, &norm, NormMode::Identity).unwrap();
        assert!(max_diff(&raw, &mean) < 1e-12);
    }
}

#[test]
fn fusion_composes_directions_in_order() {
    let cfg = ModelConfig { num_heads: 4, ..tiny() };
    let mut r = ChaCha8Rng::seed_from_u64(13);
    let mut w = FusionWeights::<f64>::new(&mut RandomInit(&mut r), &cfg);
    w.visit_mut("", &mut |_, t| t.mapv_inplace(|_| r.random_range(-1.0..1.0)));
    let f = cfg.fusion_dim;
    let mut head = |local: bool| HeadFeatures {
        class_token: Array2::from_shape_fn((1, f), |_| r.random_range(-2.0..2.0)),
        patch_tokens: Array2::from_shape_fn((cfg.num_patches(), f), |_| r.random_range(-2.0..2.0)),
        local_token: local.then(|| Array2::from_shape_fn((1, f), |_| r.random_range(-2.0..2.0))),
    };
    let (d, b, a) = (head(true), head(false), head(true));
    let out = fusion::fuse_all(&d, Some(&b), Some(&a), &w, &cfg).unwrap();

    let h = cfg.num_heads;
    let mode = NormMode::Standard;
    let pooled = |x: &HeadFeatures<f64>, dir: &fusion::CrossAttnWeights<f64>| {
        fusion::pool_norm(&x.patch_tokens, &dir.key_norm, mode).unwrap()
    };
    let wdb = w.disease_from_body.as_ref().unwrap();
    let g_b_d = fusion::cross_attend(&d.class_token, &pooled(&b, wdb), wdb, h, mode).unwrap();
    let wbd = w.body_from_disease.as_ref().unwrap();
    let g_d_b = fusion::cross_attend(&b.class_token, &pooled(&d, wbd), wbd, h, mode).unwrap();
    let wda = w.disease_from_attr.as_ref().unwrap();
    let g_a_d = fusion::cross_attend(&g_b_d, &pooled(&a, wda), wda, h, mode).unwrap();
    let wad = w.attr_from_disease.as_ref().unwrap();
    let g_d_a = fusion::cross_attend(&a.class_token, &pooled(&d, wad), wad, h, mode).unwrap();
    let wl = w.local_disease_from_attr.as_ref().unwrap();
    let key = ln(a.local_token.as_ref().unwrap(), &wl.key_norm.gamma, &wl.key_norm.beta);
    let l_a_d = fusion::cross_attend(d.local_token.as_ref().unwrap(), &key, wl, h, mode).unwrap();
    let wl = w.local_attr_from_disease.as_ref().unwrap();
    let key = ln(d.local_token.as_ref().unwrap(), &wl.key_norm.gamma, &wl.key_norm.beta);
    let l_d_a = fusion::cross_attend(a.local_token.as_ref().unwrap(), &key, wl, h, mode).unwrap();

    let pairs = [
        (out.disease_from_body, g_b_d),
        (out.body_from_disease, g_d_b),
        (out.disease_from_attr, g_a_d),
        (out.attr_from_disease, g_d_a),
        (out.local_disease_from_attr, l_a_d),
        (out.local_attr_from_disease, l_d_a),
    ];
    for (i, (got, want)) in pairs.into_iter().enumerate() {
        assert!(max_diff(&got.unwrap(), &want) < 1e-12, "direction {i}");
    }
}

#[test]
fn backbone_layers_chain() {
    let cfg = tiny();
    let w = ModelWeights::<f64>::init(&cfg, 3).unwrap();
    let img = random_image(3, 16, 16);
    let (tokens, records) = backbone::forward_backbone(&img, &w.backbone, &cfg).unwrap();
    let patches = backbone::patchify::<f64>(&img, &cfg).unwrap();
    let mut t = backbone::embed(&patches, &w.backbone).unwrap();
    for (i, layer) in w.backbone.layers.iter().enumerate() {
        let (next, rec) = backbone::encoder_layer(&t, layer, &cfg, i).unwrap();
        assert_eq!(rec, records[i]);
        t = next;
    }
    assert!(max_diff(&t.tokens, &tokens.tokens) < 1e-12);
    assert_eq!(tokens.tokens.dim(), (cfg.num_tokens(), cfg.embed_dim));
    let back = backbone::unpatchify(&patches, &cfg).unwrap();
    assert_eq!(back, img);
}
