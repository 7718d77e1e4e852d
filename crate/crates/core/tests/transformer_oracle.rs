//! Hand-rolled single-head Transformer computations checked against the
//! layered implementation.

use apt_core::model::{ModelConfig, Session, TokenBatch, Transformer, BOS};
use apt_core::{Dtype, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn vecp(store: &ParamStore, name: &str) -> Vec<f64> {
    store.by_name(name).unwrap().data().to_vec()
}

fn matp(store: &ParamStore, name: &str) -> Mat {
    mat(store.by_name(name).unwrap())
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| (0..b.len()).map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>()).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter().enumerate().map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * gain[c] + bias[c]).collect()
        })
        .collect()
}

/// Single-head attention with an optional causal mask.
fn attend(store: &ParamStore, prefix: &str, x: &Mat, mem: &Mat, causal: bool) -> Mat {
    let q = affine(x, &matp(store, &format!("{prefix}.query.w")), &vecp(store, &format!("{prefix}.query.b")));
    let k = affine(mem, &matp(store, &format!("{prefix}.key.w")), &vecp(store, &format!("{prefix}.key.b")));
    let v = affine(mem, &matp(store, &format!("{prefix}.value.w")), &vecp(store, &format!("{prefix}.value.b")));
    let d = q[0].len() as f64;
    let mut ctx = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let scores: Vec<f64> = k
            .iter()
            .enumerate()
            .map(|(j, kj)| {
                if causal && j > i {
                    f64::NEG_INFINITY
                } else {
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()
                }
            })
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let row: Vec<f64> = (0..v[0].len()).map(|c| e.iter().zip(&v).map(|(w, vr)| w / z * vr[c]).sum()).collect();
        ctx.push(row);
    }
    affine(&ctx, &matp(store, &format!("{prefix}.output.w")), &vecp(store, &format!("{prefix}.output.b")))
}

fn ffn(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let h = affine(x, &matp(store, &format!("{prefix}.inner.w")), &vecp(store, &format!("{prefix}.inner.b")));
    let h: Mat = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    affine(&h, &matp(store, &format!("{prefix}.outer.w")), &vecp(store, &format!("{prefix}.outer.b")))
}

fn embed(store: &ParamStore, table: &str, ids: &[usize]) -> Mat {
    let t = matp(store, table);
    let d = t[0].len();
    ids.iter()
        .enumerate()
        .map(|(pos, &id)| {
            (0..d)
                .map(|c| {
                    let angle = pos as f64 / 10000f64.powf((c / 2 * 2) as f64 / d as f64);
                    let pe = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                    t[id][c] * (d as f64).sqrt() + pe
                })
                .collect()
        })
        .collect()
}

fn config() -> ModelConfig {
    ModelConfig {
        d_model: 6,
        n_heads: 1,
        enc_depth: 1,
        dec_depth: 1,
        d_ff: 10,
        src_vocab: 9,
        tgt_vocab: 8,
        dropout: 0.0,
        label_smoothing: 0.0,
        max_len: 8,
    }
}

fn oracle_encoder(store: &ParamStore, x: &[usize]) -> Mat {
    let r0 = embed(store, "src_embed", x);
    let h = norm(
        &add(&r0, &attend(store, "encoder.0.self_attn", &r0, &r0, false)),
        &vecp(store, "encoder.0.attn_norm.gain"),
        &vecp(store, "encoder.0.attn_norm.bias"),
    );
    norm(
        &add(&h, &ffn(store, "encoder.0.ffn", &h)),
        &vecp(store, "encoder.0.ffn_norm.gain"),
        &vecp(store, "encoder.0.ffn_norm.bias"),
    )
}

fn perturbed_store(seed: u64) -> (ParamStore, Transformer) {
    let mut store = ParamStore::new(Dtype::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Transformer::init(&mut store, &config(), &mut rng).unwrap();
    // Non-trivial biases and norm parameters so every term is exercised.
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let t = store.get(id).clone();
        let data: Vec<f64> = t.data().iter().enumerate().map(|(j, v)| v + 0.05 * (((i * 31 + j * 7) % 13) as f64 - 6.0) / 6.0).collect();
        store.set(id, Tensor::new(t.shape().to_vec(), data, Dtype::F64).unwrap()).unwrap();
    }
    (store, model)
}

#[test]
fn two_token_encoder_matches_straight_line_oracle() {
    let (store, model) = perturbed_store(41);
    let x = [5, 7];
    let mut s = Session::inference(&store);
    let enc = model.encode(&mut s, &TokenBatch::single(&x)).unwrap();
    let got = mat(s.graph.value(enc.output()));
    let want = oracle_encoder(&store, &x);
    for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((g - w).abs() <= 1e-5, "{g} vs {w}");
    }
}

#[test]
fn single_step_decoder_matches_straight_line_oracle() {
    let (store, model) = perturbed_store(43);
    let x = [5, 7, 6];
    let mut s = Session::inference(&store);
    let enc = model.encode(&mut s, &TokenBatch::single(&x)).unwrap();
    let (logits, _) = model.decode(&mut s, &TokenBatch::single(&[BOS]), &enc).unwrap();
    let got = mat(s.graph.value(logits));

    let memory = oracle_encoder(&store, &x);
    let r0 = embed(&store, "tgt_embed", &[BOS]);
    let sd = norm(
        &add(&r0, &attend(&store, "decoder.0.self_attn", &r0, &r0, true)),
        &vecp(&store, "decoder.0.attn_norm.gain"),
        &vecp(&store, "decoder.0.attn_norm.bias"),
    );
    let cd = norm(
        &add(&sd, &attend(&store, "decoder.0.cross_attn", &sd, &memory, false)),
        &vecp(&store, "decoder.0.cross_norm.gain"),
        &vecp(&store, "decoder.0.cross_norm.bias"),
    );
    let rd = norm(
        &add(&cd, &ffn(&store, "decoder.0.ffn", &cd)),
        &vecp(&store, "decoder.0.ffn_norm.gain"),
        &vecp(&store, "decoder.0.ffn_norm.bias"),
    );
    let want = affine(&rd, &matp(&store, "output.w"), &vecp(&store, "output.b"));
    assert_eq!(got.len(), 1);
    for (g, w) in got[0].iter().zip(&want[0]) {
        assert!((g - w).abs() <= 1e-5, "{g} vs {w}");
    }
}
