use super::*;
use crate::masks::{causal_mask, windowed_mask};
use rand::Rng;

fn tiny(heads: usize) -> ModelConfig {
    ModelConfig {
        channels: 16,
        layers: 2,
        attn_heads: 2,
        ff_width: 24,
        heads,
        num_classes: 6,
        dropout: 0.0,
        encoder_widths: [4, 4, 8, 8],
    }
}

fn noise_image(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = GrayImage::filled(h, w, 255);
    for y in 0..h {
        for x in 0..w {
            img.set(y, x, rng.gen());
        }
    }
    img
}

#[test]
fn encoder_grid_shape() {
    let m = Model::<f32>::new(tiny(1), 1).unwrap();
    let g = m.encode_image(&noise_image(64, 256, 0)).unwrap();
    assert_eq!((g.height, g.width, g.channels), (2, 32, 16));
    let g = m.encode_image(&noise_image(33, 9, 0)).unwrap();
    assert_eq!((g.height, g.width), (2, 2));
    let g = m.encode_image(&noise_image(32, 8, 0)).unwrap();
    assert_eq!((g.height, g.width), (1, 1));
}

#[test]
fn encoder_rejects_tiny_images() {
    let m = Model::<f32>::new(tiny(1), 1).unwrap();
    for (h, w) in [(31, 64), (64, 7), (0, 0)] {
        assert!(matches!(
            m.encode_image(&noise_image(h, w, 0)),
            Err(Error::ImageTooSmall { .. })
        ));
    }
}

#[test]
fn positional_encoding_values() {
    let v = pe1d::<f64>(0, 8);
    assert_eq!(v, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let v = pe1d::<f64>(1, 4);
    let expect = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
    for (a, b) in v.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let v = pe2d::<f64>(3, 5, 8);
    assert_eq!(&v[..4], &pe1d::<f64>(3, 4)[..]);
    assert_eq!(&v[4..], &pe1d::<f64>(5, 4)[..]);
}

#[test]
fn pe2d_is_injective_on_small_grid() {
    let mut seen: Vec<Vec<f64>> = Vec::new();
    for r in 0..4 {
        for c in 0..8 {
            let v = pe2d::<f64>(r, c, 16);
            for s in &seen {
                let d: f64 = s.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-3);
            }
            seen.push(v);
        }
    }
}

#[test]
fn flatten_is_row_major() {
    let g = FeatureGrid {
        height: 2,
        width: 3,
        channels: 2,
        values: (0..12).map(|v| v as f64).collect(),
    };
    let flat = g.flatten();
    for r in 0..2 {
        for c in 0..3 {
            let i = r * 3 + c;
            assert_eq!(&flat[i * 2..i * 2 + 2], g.at(r, c));
        }
    }
}

#[test]
fn sos_embedding_is_last_row() {
    let cfg = tiny(1);
    let m = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let q = m
        .embed_queries(&[cfg.num_classes as TokenId], &[Position::Seq(0)])
        .unwrap();
    let table = m.params().tensor_by_name("dec.embedding").unwrap();
    let c = cfg.channels;
    let row = &table[cfg.num_classes * c..(cfg.num_classes + 1) * c];
    for ((a, b), p) in q.iter().zip(row).zip(pe1d::<f64>(0, c)) {
        assert!((a - (b + p)).abs() < 1e-12);
    }
    assert!(matches!(
        m.embed_queries(&[cfg.num_classes as TokenId + 1], &[Position::Seq(0)]),
        Err(Error::InvalidToken { .. })
    ));
    assert!(matches!(
        m.embed_queries(&[0, 1], &[Position::Seq(0)]),
        Err(Error::Shape(_))
    ));
}

fn outputs(m: &Model<f64>, mem: &Memory<f64>, ids: &[TokenId], mask: &AttentionMask) -> Vec<f64> {
    m.decoder_forward(mem, ids, &sequential_positions(ids.len()), mask)
        .unwrap()
}

#[test]
fn causal_outputs_ignore_future_tokens() {
    let m = Model::<f64>::new(tiny(1), 5).unwrap();
    let mem = m.prepare_memory(&noise_image(64, 48, 1)).unwrap();
    let c = 16;
    let ids = [6, 0, 1, 2, 3, 4];
    let base = outputs(&m, &mem, &ids, &causal_mask(6));
    for i in 0..6 {
        let mut changed = ids;
        for t in changed.iter_mut().skip(i + 1) {
            *t = (*t + 1) % 6;
        }
        let out = outputs(&m, &mem, &changed, &causal_mask(6));
        for j in 0..c {
            assert!((out[i * c + j] - base[i * c + j]).abs() < 1e-6);
        }
    }
}

#[test]
fn masked_positions_have_no_influence() {
    let m = Model::<f64>::new(tiny(1), 6).unwrap();
    let mem = m.prepare_memory(&noise_image(32, 40, 2)).unwrap();
    let mask = windowed_mask(6, 2);
    let ids = [6, 6, 0, 1, 2, 3];
    let base = outputs(&m, &mem, &ids, &mask);
    for i in 0..6 {
        for j in 0..6 {
            if mask.allows(i, j) {
                continue;
            }
            let mut changed = ids;
            changed[j] = (changed[j] + 2) % 6;
            let out = outputs(&m, &mem, &changed, &mask);
            for d in 0..16 {
                assert_eq!(out[i * 16 + d], base[i * 16 + d]);
            }
        }
    }
}

#[test]
fn window_queries_see_each_other() {
    let m = Model::<f64>::new(tiny(1), 7).unwrap();
    let mem = m.prepare_memory(&noise_image(32, 40, 3)).unwrap();
    let mask = windowed_mask(4, 2);
    let ids = [6, 6, 0, 1];
    let base = outputs(&m, &mem, &ids, &mask);
    let mut changed = ids;
    changed[3] = 4;
    let out = outputs(&m, &mem, &changed, &mask);
    let diff: f64 = (0..16)
        .map(|d| (out[2 * 16 + d] - base[2 * 16 + d]).abs())
        .sum();
    assert!(diff > 1e-9);
}

#[test]
fn same_seed_same_model() {
    let a = Model::<f32>::new(tiny(2), 11).unwrap();
    let b = Model::<f32>::new(tiny(2), 11).unwrap();
    let c = Model::<f32>::new(tiny(2), 12).unwrap();
    assert_eq!(a.params().flat(), b.params().flat());
    assert_ne!(a.params().flat(), c.params().flat());
    let img = noise_image(32, 64, 4);
    let ma = a.prepare_memory(&img).unwrap();
    let o1 = a
        .decoder_forward(&ma, &[6, 1], &sequential_positions(2), &causal_mask(2))
        .unwrap();
    let o2 = a
        .decoder_forward(&ma, &[6, 1], &sequential_positions(2), &causal_mask(2))
        .unwrap();
    assert_eq!(o1, o2);
}

#[test]
fn project_heads_layout_and_limits() {
    let cfg = tiny(3);
    let mut m = Model::<f64>::new(cfg.clone(), 2).unwrap();
    for k in 0..3 {
        m.params_mut()
            .tensor_by_name_mut(&format!("head{k}.weight"))
            .unwrap()
            .fill(0.0);
        m.params_mut()
            .tensor_by_name_mut(&format!("head{k}.bias"))
            .unwrap()
            .fill(k as f64);
    }
    let out = vec![0.5; 2 * cfg.channels];
    let s = m.project_heads(&out, 3).unwrap();
    assert_eq!(s.len(), 2 * 3 * cfg.num_classes);
    for r in 0..2 {
        for k in 0..3 {
            let row = &s[(r * 3 + k) * cfg.num_classes..(r * 3 + k + 1) * cfg.num_classes];
            assert!(row.iter().all(|&v| v == k as f64));
        }
    }
    assert!(m.project_heads(&out, 4).is_err());
    assert!(m.project_heads(&out, 0).is_err());
}

#[test]
fn from_params_checks_layout() {
    let m = Model::<f32>::new(tiny(2), 0).unwrap();
    let ok = Model::from_params(tiny(2), m.params().clone());
    assert!(ok.is_ok());
    assert!(matches!(
        Model::from_params(tiny(3), m.params().clone()),
        Err(Error::Checkpoint(_))
    ));
    let mut other = tiny(2);
    other.ff_width = 32;
    assert!(matches!(
        Model::from_params(other, m.params().clone()),
        Err(Error::Checkpoint(_))
    ));
}
