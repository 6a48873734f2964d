use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikemamba_core::mamba2::{checkpoint, forward_graph, generate_greedy, model_forward, model_step, Mamba2Config, ModelParams, ModelState};
use spikemamba_core::neurons::NeuronConfig;
use spikemamba_core::numerics::{Graph, Tensor};
use spikemamba_core::Error;

fn one_layer() -> Mamba2Config {
    let mut c = Mamba2Config::toy();
    c.n_layers = 1;
    c.sgc_layers.clear();
    c
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn rms(x: &[f64], w: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + eps).sqrt();
    x.iter().zip(w).map(|(v, g)| v * s * g).collect()
}

/// `v · M` for row-major `M [rows × cols]`.
fn vecmat(v: &[f64], m: &Tensor<f64>) -> Vec<f64> {
    let cols = m.shape()[1];
    (0..cols).map(|j| v.iter().enumerate().map(|(i, x)| x * m.data()[i * cols + j]).sum()).collect()
}

#[test]
fn single_token_matches_straight_line_oracle() {
    let cfg = one_layer();
    let m = ModelParams::<f64>::init(&cfg, 21).unwrap();
    let tok = 72;
    let (logits, _) = model_forward(&m, &[tok]).unwrap();

    let (d, hp, n, h, p, w) = (cfg.d_model, cfg.inner(), cfg.n_state, cfg.n_heads, cfg.d_head, cfg.conv_width);
    let b = &m.layers[0].block;
    let e = m.embedding.row(tok).to_vec();
    let u = rms(&e, m.layers[0].norm.data(), 1e-5);
    let proj = vecmat(&u, &b.w_in);
    // A lone token only meets the last conv tap.
    let conv = |x: &[f64], k: &Tensor<f64>| -> Vec<f64> { x.iter().enumerate().map(|(c, v)| silu(v * k.data()[c * w + w - 1])).collect() };
    let z = &proj[..hp];
    let x = conv(&proj[hp..2 * hp], &b.conv_x);
    let bb = conv(&proj[2 * hp..2 * hp + n], &b.conv_b);
    let cc = conv(&proj[2 * hp + n..2 * hp + 2 * n], &b.conv_c);
    let mut o = vec![0.0; hp];
    for head in 0..h {
        let raw = proj[2 * hp + 2 * n + head] + b.dt_bias.data()[head];
        let dt = (1.0 + raw.exp()).ln();
        for pi in 0..p {
            let xv = x[head * p + pi];
            // Zero initial state: h = dt · B ⊗ x.
            let ch: f64 = (0..n).map(|ni| cc[ni] * dt * bb[ni] * xv).sum();
            o[head * p + pi] = ch + b.d_skip.data()[head * p + pi] * xv;
        }
    }
    let gated: Vec<f64> = o.iter().zip(z).map(|(a, zv)| a * silu(*zv)).collect();
    let y = rms(&gated, b.norm.data(), 1e-5);
    let out = vecmat(&y, &b.w_out);
    let resid: Vec<f64> = e.iter().zip(&out).map(|(a, b)| a + b).collect();
    let hfin = rms(&resid, m.final_norm.data(), 1e-5);
    for v in 0..cfg.vocab {
        let want: f64 = (0..d).map(|i| hfin[i] * m.embedding.row(v)[i]).sum();
        assert!((logits.row(0)[v] - want).abs() < 1e-10, "vocab {v}: {} vs {want}", logits.row(0)[v]);
    }
}

#[test]
fn bypassed_neurons_reproduce_dense_model() {
    let dense = Mamba2Config::toy();
    let m = ModelParams::<f64>::init(&dense, 3).unwrap();
    let spiking = dense.clone().spiking(NeuronConfig::tilif(4).unwrap().with_bypass(true)).with_sgc_layers([]);
    let s = m.reconfigure(&spiking).unwrap();
    let toks: Vec<usize> = (0..16).map(|i| (i * 37) % 256).collect();
    let (a, _) = model_forward(&m, &toks).unwrap();
    let (b, _) = model_forward(&s, &toks).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-4);
}

#[test]
fn logits_depend_only_on_integer_activations() {
    let cfg = Mamba2Config::toy().spiking(NeuronConfig::tilif(4).unwrap());
    let m = ModelParams::<f64>::init(&cfg, 8).unwrap();
    let toks: Vec<usize> = "the cat sat".bytes().map(usize::from).collect();
    // Smallest distance of a layer-0 input activation from a rounding boundary.
    let mut g = Graph::new();
    let bound = m.bind(&mut g, &|_| false);
    let out = forward_graph(&mut g, &m, &bound, &toks, toks.len(), None).unwrap();
    let margin = g
        .value(out.sites[0].0)
        .data()
        .iter()
        .map(|v| ((v - v.floor()) - 0.5).abs())
        .fold(f64::INFINITY, f64::min);
    assert!(margin > 1e-7, "{margin}");
    let mut p = m.clone();
    let scale = 1.0 + 1e-8;
    p.layers[0].norm = p.layers[0].norm.map(|v| v * scale);
    let (a, _) = model_forward(&m, &toks).unwrap();
    let (b, _) = model_forward(&p, &toks).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stepwise_generation_agrees_with_batched_argmax() {
    let cfg = Mamba2Config::toy();
    let m = ModelParams::<f64>::init(&cfg, 2).unwrap();
    let prompt = [256usize, 104, 105];
    let gen = generate_greedy(&m, &prompt, 6, None).unwrap();
    assert_eq!(gen, generate_greedy(&m, &prompt, 6, None).unwrap());
    let mut full = prompt.to_vec();
    full.extend(&gen);
    let (logits, _) = model_forward(&m, &full[..full.len() - 1]).unwrap();
    for (i, &t) in gen.iter().enumerate() {
        let row = logits.row(prompt.len() - 1 + i);
        let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        assert_eq!(best, t);
    }
    let mut st = ModelState::new(&m);
    let mut last = Vec::new();
    for &t in &prompt {
        last = model_step(&m, &mut st, t).unwrap();
    }
    let best = (0..last.len()).fold(0, |b, j| if last[j] > last[b] { j } else { b });
    assert_eq!(best, gen[0]);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = Mamba2Config::toy().spiking(NeuronConfig::ilif(3).unwrap());
    let mut m = ModelParams::<f32>::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    m.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-1e-3..1e-3)));
    checkpoint::save(&m, &path).unwrap();
    let back: ModelParams<f32> = checkpoint::load(&path).unwrap();
    assert_eq!(back.cfg, m.cfg);
    let mut a = Vec::new();
    let mut b = Vec::new();
    m.visit(&mut |name, t| a.push((name.to_string(), t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())));
    back.visit(&mut |name, t| b.push((name.to_string(), t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())));
    assert_eq!(a, b);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(checkpoint::load::<f32>(&path), Err(Error::Format(_))));
    assert!(matches!(checkpoint::load::<f32>(&dir.path().join("missing")), Err(Error::Io(_))));
}
