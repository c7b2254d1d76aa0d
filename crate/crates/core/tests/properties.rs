use std::collections::BTreeSet;

use deltakv::analysis::{nearest_earlier, parse_csv, residualize_trace, write_histogram_csv, Histogram};
use deltakv::cache::SlotAllocator;
use deltakv::codec::{CodecConfig, CodecParams, CodecVariant};
use deltakv::container::{load_codec, save_codec};
use deltakv::controller::{budget_count, keep_ratio, select_topk_tokens};
use deltakv::model::{apply_rope, chunk_prefill, dense_forward, init_model, remove_rope, KvTrace, ModelConfig};
use deltakv::quant::{dequantize_token, pack_nibbles, quantize_token, unpack_nibbles, QuantizedLatent};
use deltakv::reference::ReferenceSet;
use deltakv::tensor::Matrix;
use proptest::prelude::*;

fn rows(max_n: usize, max_w: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_n, 1..=max_w).prop_flat_map(|(n, w)| prop::collection::vec(prop::collection::vec(-4.0..4.0f64, w), n))
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn small_model() -> ModelConfig {
    ModelConfig { n_layers: 2, n_heads: 2, head_dim: 4, hidden: 8, vocab: 40, max_seq: 48, ffn_dim: 16, ..ModelConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantizer_error_bound_and_fixed_point(z in prop::collection::vec(-50.0..50.0f64, 1..40)) {
        let q = quantize_token(&z);
        let back: Vec<f64> = dequantize_token(&q, z.len()).unwrap();
        let half = q.scale as f64 / 2.0;
        for (a, b) in z.iter().zip(&back) {
            prop_assert!((a - b).abs() <= half * (1.0 + 1e-6) + 1e-9, "{a} vs {b}, scale {}", q.scale);
        }
        prop_assert_eq!(&quantize_token(&back), &q);
        prop_assert_eq!(QuantizedLatent::from_bytes(&q.to_bytes()).unwrap(), q);
    }

    #[test]
    fn nibbles_round_trip(codes in prop::collection::vec(0u8..16, 0..33)) {
        let packed = pack_nibbles(&codes);
        prop_assert_eq!(packed.len(), codes.len().div_ceil(2));
        prop_assert_eq!(unpack_nibbles(&packed, codes.len()).unwrap(), codes);
    }

    #[test]
    fn allocator_conserves_slots(cap in 1usize..40, ops in prop::collection::vec((any::<bool>(), 0usize..6), 0..60)) {
        let mut a = SlotAllocator::new(cap);
        let mut live: BTreeSet<usize> = BTreeSet::new();
        for (alloc, n) in ops {
            if alloc {
                match a.alloc(n) {
                    Ok(slots) => {
                        prop_assert_eq!(slots.len(), n);
                        for s in slots {
                            prop_assert!(live.insert(s), "slot {} handed out twice", s);
                        }
                    }
                    Err(_) => prop_assert!(n > cap - live.len()),
                }
            } else {
                let victims: Vec<usize> = live.iter().copied().take(n).collect();
                a.free(&victims).unwrap();
                for v in &victims {
                    live.remove(v);
                }
                if let Some(&s) = victims.first() {
                    prop_assert!(a.free(&[s]).is_err());
                }
            }
            prop_assert_eq!(a.live_count() + a.free_count(), cap);
            prop_assert_eq!(a.live_slots(), live.iter().copied().collect::<Vec<_>>());
        }
    }

    #[test]
    fn keep_ratio_monotone(l_total in 2usize..64, frac in 0.0..1.0f64, s in 1usize..32, lr in 0.0..1.0f64, q in 1.0..8.0f64) {
        let l_full = ((l_total as f64 * frac) as usize).min(l_total - 1);
        let kr = keep_ratio(l_full, l_total, s, lr, q);
        prop_assert!(kr >= keep_ratio(l_full, l_total, s + 1, lr, q));
        prop_assert!(kr >= keep_ratio(l_full, l_total, s, lr, q * 2.0));
        prop_assert!(kr <= keep_ratio(l_full + 1, l_total, s, lr, q) + 1e-12 || 1.0 / s as f64 + lr / q > 1.0);
        prop_assert!(kr > 0.0);
    }

    #[test]
    fn selection_keeps_protected_and_best(scores in prop::collection::vec(0.0..1.0f64, 1..80), r in 0.01..=1.0f64, prot in prop::collection::btree_set(0usize..100, 0..6)) {
        let sel = select_topk_tokens(&scores, r, &prot).unwrap();
        let n = scores.len();
        let kept_prot: BTreeSet<usize> = prot.iter().copied().filter(|&p| p < n).collect();
        prop_assert!(sel.selected.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(kept_prot.iter().all(|p| sel.selected.contains(p)));
        prop_assert_eq!(sel.selected.len(), budget_count(r, n).max(kept_prot.len()));
        let chosen: BTreeSet<usize> = sel.selected.iter().copied().collect();
        let worst_in = chosen.iter().filter(|j| !kept_prot.contains(j)).map(|&j| scores[j]).fold(f64::INFINITY, f64::min);
        let best_out = (0..n).filter(|j| !chosen.contains(j)).map(|j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(best_out <= worst_in);
    }

    #[test]
    fn topk_matches_sorted_oracle(data in rows(40, 6), stride in 1usize..5, k in 0usize..5) {
        let mut refs = ReferenceSet::new(stride, data[0].len()).unwrap();
        for (t, r) in data.iter().enumerate() {
            refs.maybe_append(t, r).unwrap();
        }
        prop_assert!(refs.token_indices().iter().all(|t| t % stride == 0));
        for (i, q) in data.iter().enumerate() {
            let mut oracle: Vec<(f64, usize)> = (0..i).filter(|t| t % stride == 0).map(|t| (sq(&data[t], q), t)).collect();
            oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = oracle.iter().take(k).map(|&(_, t)| t).collect();
            let got: Vec<usize> = refs.topk(q, k, i).iter().map(|&e| refs.token_index(e)).collect();
            prop_assert_eq!(got, expect);
        }
    }

    #[test]
    fn residual_is_token_minus_reference_mean(data in rows(30, 5), stride in 1usize..5, k in 1usize..4) {
        let m = Matrix::from_rows(&data).unwrap();
        let res = residualize_trace(&KvTrace { layers: vec![m.clone()] }, stride, k).unwrap();
        for (i, q) in data.iter().enumerate() {
            let mut near: Vec<(f64, usize)> = (0..i).filter(|t| t % stride == 0).map(|t| (sq(&data[t], q), t)).collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.truncate(k);
            for (c, &x) in q.iter().enumerate() {
                let bar = if near.is_empty() { 0.0 } else { near.iter().map(|&(_, t)| data[t][c]).sum::<f64>() / near.len() as f64 };
                prop_assert!((res.layers[0].get(i, c) - (x - bar)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nearest_earlier_is_argmin(data in rows(30, 4)) {
        let m = Matrix::from_rows(&data).unwrap();
        for (i, got) in nearest_earlier(&m).into_iter().enumerate() {
            let expect = (0..i).min_by(|&a, &b| sq(&data[a], &data[i]).total_cmp(&sq(&data[b], &data[i])).then(a.cmp(&b)));
            prop_assert_eq!(got, expect);
        }
    }

    #[test]
    fn rope_round_trip(half in prop::collection::vec(-3.0..3.0f64, 1..8), pos in 0usize..4096) {
        let v: Vec<f64> = half.iter().flat_map(|&x| [x, -0.5 * x + 0.25]).collect();
        let rotated = apply_rope(&v, pos, 10000.0).unwrap();
        let norm = |u: &[f64]| u.iter().map(|x| x * x).sum::<f64>();
        prop_assert!((norm(&rotated) - norm(&v)).abs() < 1e-9 * (1.0 + norm(&v)));
        let back = remove_rope(&rotated, pos, 10000.0).unwrap();
        prop_assert!(sq(&back, &v) < 1e-20);
    }

    #[test]
    fn histogram_csv_round_trip(values in prop::collection::vec(-1.0..1.0f64, 1..200), bins in 1usize..30) {
        let h = Histogram::uniform(&values, -1.0, 1.0, bins).unwrap();
        let mut buf = Vec::new();
        write_histogram_csv(&h, &mut buf).unwrap();
        let parsed = parse_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        prop_assert_eq!(parsed.len(), bins);
        for (i, row) in parsed.iter().enumerate() {
            prop_assert!((row[0] - h.edges[i]).abs() <= 1e-8 * h.edges[i].abs().max(1e-300));
            prop_assert_eq!(row[2] as u64, h.counts[i]);
        }
        prop_assert_eq!(parsed.iter().map(|r| r[2] as u64).sum::<u64>(), h.total());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn chunked_prefill_matches_dense(seed in 0u64..1000, n in 1usize..40, chunk in 1usize..12) {
        let cfg = small_model();
        let model = init_model::<f64>(&cfg, seed).unwrap();
        let tokens: Vec<u32> = (0..n).map(|i| ((i as u64 * 7 + seed) % cfg.vocab as u64) as u32).collect();
        let (dense, dense_kv) = dense_forward(&model, &tokens).unwrap();
        let (chunked, chunked_kv) = chunk_prefill(&model, &tokens, chunk).unwrap();
        let dev = dense.data().iter().zip(chunked.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(dev < 1e-10, "logit deviation {}", dev);
        for (a, b) in dense_kv.layers.iter().zip(&chunked_kv.layers) {
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-10));
        }
    }

    #[test]
    fn codec_container_round_trip(seed in any::<u64>(), light in any::<bool>(), w in 1usize..6) {
        let variant = if light { CodecVariant::Light } else { CodecVariant::Heavy };
        let codec = CodecParams::<f32>::init(&CodecConfig::for_kv_width(variant, 4 * w), seed).unwrap();
        let mut buf = Vec::new();
        save_codec(&mut buf, &codec, seed).unwrap();
        let (back, s) = load_codec::<f32>(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(s, seed);
        prop_assert_eq!(back.tensors(), codec.tensors());
    }
}
