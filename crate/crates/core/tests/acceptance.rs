//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eegvis_core::alignment::{combined_loss_graph, LOG_TAU};
use eegvis_core::encoder::{self, encode_batch, init_encoder_params, EncoderConfig};
use eegvis_core::image::Image;
use eegvis_core::metrics::{pixcorr, retrieval_topk, ssim, two_way_identification};
use eegvis_core::nsp::{
    self, forward_logits, generate_tokens, init_nsp_params, loss_graph, train_nsp, GenerateOptions, NspConfig, NspSample,
    SequenceInput,
};
use eegvis_core::numerics::{fd_gradient_oracle, relative_error, ParamStore, Resampler, Tape, Tensor, Var};
use eegvis_core::pipeline::bench::{bench_models, run_bench, Models};
use eegvis_core::pipeline::checkpoint::Checkpoint;
use eegvis_core::pipeline::config::BenchConfig;
use eegvis_core::pipeline::report::read_csv;
use eegvis_core::pipeline::stages::{self, Layout};
use eegvis_core::pipeline::synth::{synth_dataset, SynthConfig};
use eegvis_core::pipeline::RunConfig;
use eegvis_core::tokenizer::{
    cumulative_feature, decoder_forward, encode_tokens, encoder_forward, init_tokenizer_params, train_vqvae,
    vq_gradients, vq_loss_graph, Codebook, FeatureMap, ResidualStack, ScaleSchedule, Tokenizer, TokenizerConfig, CODEBOOK,
};
use eegvis_core::Result;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn perturb(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += scale * (rng.random::<f64>() - 0.5));
    }
}

/// Largest relative error between tape gradients and the central-difference
/// oracle of `loss` over every parameter.
fn fd_check(store: &ParamStore, loss: impl Fn(&mut Tape, &ParamStore) -> Result<Var>) -> std::result::Result<f64, String> {
    let mut tape = Tape::new();
    let l = ok(loss(&mut tape, store))?;
    let grads = tape.param_grads(&ok(tape.backward(l))?);
    let fd = ok(fd_gradient_oracle(
        |s| {
            let mut t = Tape::new();
            let l = loss(&mut t, s)?;
            Ok(t.scalar(l))
        },
        store,
        &[],
        1e-5,
    ))?;
    worst(&grads, &fd)
}

fn worst(grads: &BTreeMap<String, Tensor>, fd: &BTreeMap<String, Tensor>) -> std::result::Result<f64, String> {
    let mut max = 0.0f64;
    for (name, want) in fd {
        let got = grads.get(name).ok_or(format!("no gradient for {name}"))?;
        let err = relative_error(got.data(), want.data());
        ensure(err < 1e-6, format!("{name}: relative error {err:.3e}"))?;
        max = max.max(err);
    }
    Ok(max)
}

// ---------------------------------------------------------------------------
// 1. gradients

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        n_channels: 2,
        n_samples: 8,
        window: 4,
        conv_in: vec![1],
        conv_out: vec![4],
        kernels: vec![3],
        strides: vec![2],
        paddings: vec![1],
        norm_groups: 2,
        hidden: 4,
        embed_dim: 4,
        layers: 1,
        mlp: 8,
        heads: 2,
        ..EncoderConfig::desk(2, 8, 4)
    }
}

fn wave(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| (0.7 * i as f64 + phase).sin() + 0.1 * i as f64).collect()
}

fn grad_encoder() -> std::result::Result<f64, String> {
    let cfg = tiny_encoder();
    let mut p = ok(init_encoder_params(&cfg, 5))?;
    perturb(&mut p, 0.3, 9);
    let (a, b) = (wave(16, 0.0), wave(16, 2.0));
    let weights = [0.7, -1.3, 0.4, 2.1, -0.2, 0.9, 1.1, -0.6];
    fd_check(&p, |tape, store| {
        let trace = encode_batch(tape, store, &cfg, &[&a, &b], None)?;
        let w = tape.constant(Tensor::new(vec![2, 4], weights.to_vec())?);
        let prod = tape.mul(trace.embeddings, w)?;
        Ok(tape.sum(prod))
    })
}

fn grad_alignment() -> std::result::Result<f64, String> {
    let cfg = tiny_encoder();
    let mut p = ok(init_encoder_params(&cfg, 6))?;
    perturb(&mut p, 0.3, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    p.insert("z", Tensor::randn(&[3, 4], 1.0, &mut rng));
    p.insert(LOG_TAU, Tensor::scalar(0.2f64.ln()));
    let epochs: Vec<Vec<f64>> = (0..3).map(|i| wave(16, i as f64)).collect();
    let mut max = 0.0f64;
    for normalize in [true, false] {
        max = max.max(fd_check(&p, |tape, store| {
            let refs: Vec<&[f64]> = epochs.iter().map(Vec::as_slice).collect();
            let e = encode_batch(tape, store, &cfg, &refs, None)?.embeddings;
            let z = tape.param(store, "z")?;
            let t = tape.param(store, LOG_TAU)?;
            combined_loss_graph(tape, e, z, t, 0.8, normalize)
        })?);
    }
    Ok(max)
}

fn tiny_tokenizer() -> TokenizerConfig {
    TokenizerConfig {
        image_size: 4,
        image_channels: 1,
        hidden: 2,
        code_dim: 2,
        vocab: 4,
        schedule: ScaleSchedule::squares(&[1, 2]).unwrap(),
        ..TokenizerConfig::default()
    }
}

/// The straight-through loss with its data-dependent parts frozen at the
/// base point: tokens, the decoder-input offset `q − f`, and the stopped
/// operands of the codebook and commitment terms.
fn grad_tokenizer() -> std::result::Result<f64, String> {
    let cfg = tiny_tokenizer();
    let mut p = ok(init_tokenizer_params(&cfg, 3))?;
    perturb(&mut p, 0.2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images: Vec<Image> = (0..2)
        .map(|_| Image::new(1, 4, 4, (0..16).map(|_| rng.random::<f64>()).collect()).unwrap())
        .collect();
    let refs: Vec<&Image> = images.iter().collect();

    let mut tape = Tape::new();
    let g = ok(vq_loss_graph(&mut tape, &p, &cfg, &refs))?;
    let f0 = tape.value(g.features).clone();
    let q0 = tape.value(g.quantized).clone();
    let tokens = g.tokens.clone();
    let gap = Tensor::new(f0.shape().to_vec(), q0.data().iter().zip(f0.data()).map(|(q, f)| q - f).collect()).unwrap();

    let (_, grads) = ok(vq_gradients(&p, &cfg, &refs))?;
    let pixels: Vec<f64> = images.iter().flat_map(|i| i.data.clone()).collect();
    let n = images.len();
    let (fh, fw) = cfg.feature_size();
    let surrogate = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![n, 1, 4, 4], pixels.clone())?);
        let f = encoder_forward(&mut t, s, &cfg, x)?;
        let gap = t.constant(gap.clone());
        let st = t.add(f, gap)?;
        let recon = decoder_forward(&mut t, s, &cfg, st, n)?;
        let d = t.sub(recon, x)?;
        let recon_loss = t.mean_square(d);
        let cb = t.param(s, CODEBOOK)?;
        let mut q: Option<Var> = None;
        for (k, &(hk, wk)) in cfg.schedule.sizes().iter().enumerate() {
            let idx: Vec<usize> = tokens.iter().flat_map(|tk| tk[k].iter().map(|&v| v as usize)).collect();
            let rows = t.gather_rows(cb, &idx)?;
            let up = t.resample_rows(rows, n, Arc::new(Resampler::new((hk, wk), (fh, fw))))?;
            q = Some(match q {
                None => up,
                Some(acc) => t.add(acc, up)?,
            });
        }
        let f0c = t.constant(f0.clone());
        let q0c = t.constant(q0.clone());
        let cd = t.sub(q.unwrap(), f0c)?;
        let cl = t.mean_square(cd);
        let md = t.sub(f, q0c)?;
        let ml = t.mean_square(md);
        let ml = t.scale(ml, cfg.commitment);
        let a = t.add(recon_loss, cl)?;
        let total = t.add(a, ml)?;
        Ok(t.scalar(total))
    };
    let fd = ok(fd_gradient_oracle(surrogate, &p, &[], 1e-5))?;
    worst(&grads, &fd)
}

fn tiny_nsp(schedule: &[usize]) -> NspConfig {
    NspConfig {
        depth: 1,
        hidden: 8,
        mlp: 16,
        heads: 2,
        top_k: 4,
        epochs: 1,
        batch_size: 4,
        ..NspConfig::desk(ScaleSchedule::squares(schedule).unwrap(), 4, 2, 3)
    }
}

fn random_codebook(v: usize, d: usize, rng: &mut ChaCha8Rng) -> Codebook {
    Codebook::new(Tensor::randn(&[v, d], 1.0, rng)).unwrap()
}

fn random_sample(cfg: &NspConfig, book: &Codebook, rng: &mut ChaCha8Rng) -> NspSample {
    let tokens: Vec<Vec<u32>> = (0..cfg.schedule.len())
        .map(|k| (0..cfg.schedule.tokens_at(k)).map(|_| rng.random_range(0..cfg.vocab as u32)).collect())
        .collect();
    let stack = ResidualStack::from_tokens(tokens, &cfg.schedule, book).unwrap();
    let cond = (0..cfg.embed_dim).map(|_| rng.random::<f64>() - 0.5).collect();
    NspSample::new(cond, stack).unwrap()
}

fn grad_nsp() -> std::result::Result<f64, String> {
    let cfg = tiny_nsp(&[1, 2]);
    let mut p = ok(init_nsp_params(&cfg, 11))?;
    perturb(&mut p, 0.2, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let book = random_codebook(4, 2, &mut rng);
    let samples: Vec<NspSample> = (0..3).map(|_| random_sample(&cfg, &book, &mut rng)).collect();
    let refs: Vec<&NspSample> = samples.iter().collect();
    let dropped = [false, true, false];
    fd_check(&p, |tape, store| Ok(loss_graph(tape, store, &cfg, &refs, &dropped)?.0))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let errs = [
        ("encoder", grad_encoder()?),
        ("alignment", grad_alignment()?),
        ("tokenizer", grad_tokenizer()?),
        ("nsp", grad_nsp()?),
    ];
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("gradient suite took {elapsed:?}"))?;
    let parts: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Ok(format!("max relative error {}; {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 2. residual quantization against a direct loop

/// Half-pixel bilinear resize written as a direct four-neighbour blend.
fn blend_resize(src: &[Vec<f64>], sh: usize, sw: usize, th: usize, tw: usize) -> Vec<Vec<f64>> {
    let coord = |i: usize, s: usize, t: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * s as f64 / t as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, pos - lo as f64)
    };
    let d = src[0].len();
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let (y0, y1, ty) = coord(y, sh, th);
        for x in 0..tw {
            let (x0, x1, tx) = coord(x, sw, tw);
            let v: Vec<f64> = (0..d)
                .map(|c| {
                    let top = (1.0 - tx) * src[y0 * sw + x0][c] + tx * src[y0 * sw + x1][c];
                    let bottom = (1.0 - tx) * src[y1 * sw + x0][c] + tx * src[y1 * sw + x1][c];
                    (1.0 - ty) * top + ty * bottom
                })
                .collect();
            out.push(v);
        }
    }
    out
}

fn nearest(codes: &[Vec<f64>], v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in codes.iter().enumerate() {
        let d: f64 = c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

struct LoopResult {
    tokens: Vec<Vec<u32>>,
    remainder: Vec<Vec<f64>>,
    accumulated: Vec<Vec<f64>>,
}

fn direct_loop(f: &[Vec<f64>], side: usize, sides: &[usize], codes: &[Vec<f64>]) -> LoopResult {
    let d = f[0].len();
    let mut r = f.to_vec();
    let mut acc = vec![vec![0.0; d]; f.len()];
    let mut tokens = Vec::new();
    for &s in sides {
        let down = blend_resize(&r, side, side, s, s);
        let idx: Vec<usize> = down.iter().map(|v| nearest(codes, v)).collect();
        let picked: Vec<Vec<f64>> = idx.iter().map(|&i| codes[i].clone()).collect();
        let up = blend_resize(&picked, s, s, side, side);
        for (i, u) in up.iter().enumerate() {
            for c in 0..d {
                r[i][c] -= u[c];
                acc[i][c] += u[c];
            }
        }
        tokens.push(idx.iter().map(|&i| i as u32).collect());
    }
    LoopResult {
        tokens,
        remainder: r,
        accumulated: acc,
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = 0;
    let mut worst_identity = 0.0f64;
    for (sides, trials) in [(vec![1usize, 2], 500), (vec![1, 2, 4], 500)] {
        let side = *sides.last().unwrap();
        let sched = ScaleSchedule::squares(&sides).unwrap();
        for _ in 0..trials {
            let v = rng.random_range(2..=8usize);
            let d = rng.random_range(1..=3usize);
            let codes: Vec<Vec<f64>> = (0..v).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
            let f: Vec<Vec<f64>> = (0..side * side).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let book = Codebook::new(Tensor::from_rows(&codes).unwrap()).unwrap();
            let fmap = FeatureMap::new(side, side, Tensor::from_rows(&f).unwrap()).unwrap();
            let enc = ok(encode_tokens(&fmap, &sched, &book))?;
            let want = direct_loop(&f, side, &sides, &codes);
            ensure(enc.stack.tokens == want.tokens, format!("tokens differ: {:?} vs {:?}", enc.stack.tokens, want.tokens))?;
            let fk = ok(cumulative_feature(&enc.stack, sched.len()))?;
            for i in 0..side * side {
                for c in 0..d {
                    let total = fk.cell(i)[c] + enc.remainder.cell(i)[c];
                    worst_identity = worst_identity.max((total - f[i][c]).abs());
                    ensure((fk.cell(i)[c] - want.accumulated[i][c]).abs() < 1e-9, "accumulated features differ")?;
                    ensure((enc.remainder.cell(i)[c] - want.remainder[i][c]).abs() < 1e-9, "remainders differ")?;
                }
            }
            cases += 1;
        }
    }
    ensure(worst_identity < 1e-9, format!("F_K + r deviates from F by {worst_identity:.3e}"))?;
    Ok(format!("{cases} features agree token-for-token; max |F_K + r − F| {worst_identity:.1e}"))
}

// ---------------------------------------------------------------------------
// 3. block-causal mask

fn random_map(h: usize, w: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    FeatureMap::new(h, w, Tensor::randn(&[h * w, d], 1.0, rng)).unwrap()
}

fn criterion_3() -> Outcome {
    let mut checked = 0;
    for sides in [vec![1usize, 2], vec![1, 2, 3, 4]] {
        let cfg = tiny_nsp(&sides);
        let sched = cfg.schedule.clone();
        let offsets = sched.offsets();
        let k = sched.len();
        let mut rng = ChaCha8Rng::seed_from_u64(300 + k as u64);
        for trial in 0..100 {
            let p = ok(init_nsp_params(&cfg, trial))?;
            let cond: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.random::<f64>() - 0.5).collect();
            let inputs: Vec<FeatureMap> = (1..k)
                .map(|j| {
                    let (h, w) = sched.sizes()[j];
                    random_map(h, w, cfg.code_dim, &mut rng)
                })
                .collect();
            let logits = |inputs: &[FeatureMap]| -> Result<Vec<f64>> {
                let mut t = Tape::new();
                let seq = [SequenceInput { cond: Some(&cond), inputs }];
                let l = forward_logits(&mut t, &p, &cfg, &seq, k)?;
                Ok(t.value(l).data().to_vec())
            };
            let base = ok(logits(&inputs))?;
            // Inputs from index b − 1 onward feed blocks b and later.
            let b = rng.random_range(1..k);
            let mut changed = inputs.clone();
            for m in changed.iter_mut().skip(b - 1) {
                m.values.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-3.0..3.0));
            }
            let out = ok(logits(&changed))?;
            let cut = offsets[b] * cfg.vocab;
            ensure(out[..cut] == base[..cut], format!("schedule {sides:?}: block < {b} logits moved"))?;
            ensure(out[cut..] != base[cut..], format!("schedule {sides:?}: perturbation had no effect"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} perturbations, earlier blocks bit-identical"))
}

// ---------------------------------------------------------------------------
// 4. metric goldens

fn gray(h: usize, w: usize, data: Vec<f64>) -> Image {
    Image::new(1, h, w, data).unwrap()
}

fn ramp(c: usize, h: usize, w: usize, m: usize, k: usize, d: usize) -> Image {
    let data = (0..c * h * w).map(|i| ((i * m + k) % d) as f64 / (d - 1) as f64).collect();
    Image::new(c, h, w, data).unwrap()
}

fn close(got: f64, want: f64, what: &str) -> std::result::Result<(), String> {
    ensure((got - want).abs() < 1e-9, format!("{what}: {got} vs {want}"))
}

fn brute_two_way(recon: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let n = recon.len();
    let mut wins = 0.0;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for (own, other) in [
                (cos(&recon[i], &truth[i]), cos(&recon[i], &truth[j])),
                (cos(&recon[i], &truth[i]), cos(&recon[j], &truth[i])),
            ] {
                wins += if own > other {
                    1.0
                } else if own == other {
                    0.5
                } else {
                    0.0
                };
                total += 1.0;
            }
        }
    }
    wins / total
}

fn criterion_4() -> Outcome {
    let a = gray(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
    let b = gray(2, 2, vec![1.0, 3.0, 2.0, 4.0]);
    close(ok(pixcorr(&a, &b))?, 0.8, "pixcorr")?;
    close(ok(pixcorr(&a, &a))?, 1.0, "pixcorr self")?;
    close(ok(pixcorr(&a, &gray(2, 2, vec![5.0, 4.0, 3.0, 2.0])))?, -1.0, "pixcorr reversed")?;
    ensure(pixcorr(&a, &gray(2, 2, vec![1.0; 4])).is_err(), "constant image must be rejected")?;

    let c1 = 1e-4;
    close(ok(ssim(&Image::filled(1, 16, 16, 0.0), &Image::filled(1, 16, 16, 1.0)))?, c1 / (1.0 + c1), "ssim constants")?;
    let x = ramp(1, 16, 16, 37, 0, 101);
    close(ok(ssim(&x, &x))?, 1.0, "ssim self")?;
    for (p, q, want) in [
        (ramp(1, 8, 8, 37, 0, 101), ramp(1, 8, 8, 53, 7, 97), 0.26824420657299686),
        (ramp(1, 16, 16, 37, 0, 101), ramp(1, 16, 16, 53, 7, 97), -0.10893152215494345),
        (ramp(3, 16, 16, 29, 3, 89), ramp(3, 16, 16, 31, 5, 83), 0.13886596840460932),
    ] {
        close(ok(ssim(&p, &q))?, want, "ssim golden")?;
    }
    let noise = ramp(1, 16, 16, 53, 7, 97);
    let noisy = Image::new(1, 16, 16, x.data.iter().zip(&noise.data).map(|(v, n)| (v + 0.1 * n - 0.05).clamp(0.0, 1.0)).collect()).unwrap();
    close(ok(ssim(&x, &noisy))?, 0.9950696669606727, "ssim noisy golden")?;

    let eye = Tensor::identity(3);
    close(ok(two_way_identification(&eye, &eye))?, 1.0, "two-way self")?;
    let truth = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    close(ok(two_way_identification(&Tensor::full(&[3, 2], 1.0), &truth))?, 0.5, "two-way identical rows")?;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..50 {
        let r: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let t: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let got = ok(two_way_identification(&Tensor::from_rows(&r).unwrap(), &Tensor::from_rows(&t).unwrap()))?;
        close(got, brute_two_way(&r, &t), "two-way brute force")?;
    }

    let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
    let q = Tensor::from_rows(&[vec![0.3, 1.0], vec![0.0, 1.0], vec![-1.0, 0.1]]).unwrap();
    let r = ok(retrieval_topk(&q, &g, &[0, 1, 2], 2))?;
    ensure(r.ranks == vec![2, 1, 1], format!("ranks {:?}", r.ranks))?;
    close(r.top1, 2.0 / 3.0, "top-1")?;
    close(r.topk, 1.0, "top-2")?;

    let (m, n, d) = (200, 2000, 32);
    let gallery = Tensor::randn(&[m, d], 1.0, &mut rng);
    let queries = Tensor::randn(&[n, d], 1.0, &mut rng);
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
    let top1 = ok(retrieval_topk(&queries, &gallery, &targets, 1))?.top1;
    let p = 1.0 / m as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    ensure((top1 - p).abs() <= 3.0 * sigma, format!("random top-1 {top1} outside {p} ± {:.5}", 3.0 * sigma))?;
    Ok(format!("goldens within 1e-9; random top-1 {top1:.4} vs {p:.4} ± {:.4}", 3.0 * sigma))
}

// ---------------------------------------------------------------------------
// 5. end-to-end desk run

fn desk_config() -> RunConfig {
    RunConfig {
        sequential: true,
        ..RunConfig::desk().with_schedule(ScaleSchedule::squares(&[1, 2, 4]).unwrap())
    }
}

fn column(path: &Path, name: &str) -> std::result::Result<Vec<f64>, String> {
    let (header, rows) = ok(read_csv(path))?;
    let at = header.iter().position(|h| h == name).ok_or(format!("{} has no {name} column", path.display()))?;
    rows.iter().map(|r| r[at].parse::<f64>().map_err(|e| e.to_string())).collect()
}

fn criterion_5(root: &Path) -> Outcome {
    let cfg = desk_config();
    let layout = Layout::new(root);
    let start = Instant::now();
    let summary = ok(stages::run_all(&cfg, &layout))?;
    let elapsed = start.elapsed();
    let val_top1 = *column(&layout.curve("align"), "val_top1")?.last().ok_or("empty alignment curve")?;
    let two_way = *summary.two_way.get("image_embed").ok_or("no image_embed two-way score")?;
    ensure(elapsed < Duration::from_secs(15 * 60), format!("run took {elapsed:?}"))?;
    ensure(val_top1 >= 0.3125, format!("validation top-1 {val_top1}"))?;
    ensure(summary.top1 >= 0.3125, format!("held-out top-1 {}", summary.top1))?;
    ensure(two_way >= 0.75, format!("two-way {two_way}"))?;
    ensure(summary.pixcorr >= 0.3, format!("pixcorr {}", summary.pixcorr))?;
    Ok(format!(
        "val top-1 {val_top1:.4}, two-way {two_way:.4}, pixcorr {:.4}, ssim {:.4}; {:.0}s",
        summary.pixcorr,
        summary.ssim,
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 6. overfitting a single example

fn criterion_6() -> Outcome {
    let sched = ScaleSchedule::squares(&[1, 2, 4]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let book = random_codebook(8, 4, &mut rng);
    let tokens: Vec<Vec<u32>> = (0..sched.len())
        .map(|k| (0..sched.tokens_at(k)).map(|_| rng.random_range(0..8)).collect())
        .collect();
    let stack = ok(ResidualStack::from_tokens(tokens.clone(), &sched, &book))?;
    let cond: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
    let mut cfg = NspConfig {
        cond_drop_rate: 0.0,
        epochs: 400,
        batch_size: 1,
        ..NspConfig::desk(sched, 8, 4, 8)
    };
    cfg.optimizer.lr = 3e-3;
    let sample = ok(NspSample::new(cond.clone(), stack))?;
    let out = ok(train_nsp(std::slice::from_ref(&sample), &cfg, ok(init_nsp_params(&cfg, 1))?, 1))?;
    let mut tape = Tape::new();
    let (loss, _) = ok(loss_graph(&mut tape, &out.params, &cfg, &[&sample], &[false]))?;
    let nsp_loss = tape.scalar(loss);
    let greedy = GenerateOptions {
        guidance: 1.0,
        top_k: 1,
        seed: 0,
    };
    let (generated, _) = ok(generate_tokens(&cond, &cfg, &out.params, &book, &greedy))?;
    ensure(nsp_loss < 1e-3, format!("single-pair loss {nsp_loss:.3e}"))?;
    ensure(generated.tokens == tokens, "greedy generation differs from the memorized stack")?;

    let data = ok(synth_dataset(&SynthConfig::default(), 0))?;
    let img = data.images[0].clone();
    let tcfg = TokenizerConfig {
        epochs: 400,
        batch_size: 1,
        ..TokenizerConfig::default()
    };
    let (params, _) = ok(train_vqvae(std::slice::from_ref(&img), &tcfg, ok(init_tokenizer_params(&tcfg, 0))?, 0))?;
    let recon = ok(ok(Tokenizer::new(tcfg, params))?.reconstruct(&img))?;
    let mse = recon.data.iter().zip(&img.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / img.data.len() as f64;
    ensure(mse < 1e-3, format!("single-image reconstruction mse {mse:.3e}"))?;
    Ok(format!("nsp loss {nsp_loss:.2e} with exact greedy stack; vq recon mse {mse:.2e}"))
}

// ---------------------------------------------------------------------------
// 7. efficiency accounting

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn block(h: usize, m: usize) -> usize {
    4 * h + 4 * linear(h, h) + linear(h, m) + linear(m, h)
}

fn nsp_params(c: &NspConfig) -> usize {
    let h = c.hidden;
    linear(c.embed_dim, h)
        + h
        + linear(c.code_dim, h)
        + c.schedule.len() * h
        + c.schedule.total_tokens() * h
        + c.depth * block(h, c.mlp)
        + if c.depth > 0 { 2 * h } else { 0 }
        + linear(h, c.vocab)
}

fn tokenizer_params(c: &TokenizerConfig) -> usize {
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let downs = (c.image_size / c.feature_size().0).trailing_zeros() as usize;
    let (ch, h, d) = (c.image_channels, c.hidden, c.code_dim);
    conv(ch, h, 3) + downs * conv(h, h, 3) + conv(h, d, 1) + conv(d, h, 1) + downs * conv(h, h, 3) + conv(h, ch, 3) + c.vocab * d
}

fn encoder_params(c: &EncoderConfig) -> usize {
    let mut len = c.window;
    let mut total = 0;
    for i in 0..c.kernels.len() {
        len = (len + 2 * c.paddings[i] - c.kernels[i]) / c.strides[i] + 1;
        total += c.conv_out[i] * c.conv_in[i] * c.kernels[i] + 3 * c.conv_out[i];
    }
    let h = c.hidden;
    total
        + linear(c.conv_out.last().unwrap() * len, h)
        + (c.n_samples / c.window) * h
        + c.n_channels * h
        + c.layers * block(h, c.mlp)
        + if c.layers > 0 { 2 * h } else { 0 }
        + linear(h, c.embed_dim)
}

fn criterion_7(root: &Path) -> Outcome {
    let cfg = desk_config();
    let report = ok(run_bench(&cfg, &Layout::new(root)))?;
    ensure(report.steps == 3, format!("desk schedule took {} steps", report.steps))?;
    let want = [
        ("encoder", encoder_params(&cfg.encoder)),
        ("nsp", nsp_params(&cfg.nsp)),
        ("tokenizer", tokenizer_params(&cfg.tokenizer)),
    ];
    for (name, n) in want {
        ensure(report.parameters.get(name) == Some(&n), format!("{name}: {:?} parameters, expected {n}", report.parameters.get(name)))?;
    }
    ensure(report.parameters_total == want.iter().map(|w| w.1).sum::<usize>(), "parameter total")?;
    ensure(report.spread < 0.1, format!("latency spread {:.3}", report.spread))?;

    let sched = ScaleSchedule::reference();
    let tcfg = ten_scale_tokenizer(sched.clone());
    let ecfg = EncoderConfig::desk(8, 64, 8);
    let ncfg = NspConfig::desk(sched, tcfg.vocab, tcfg.code_dim, ecfg.embed_dim);
    let tok = ok(Tokenizer::new(tcfg.clone(), ok(init_tokenizer_params(&tcfg, 0))?))?;
    let enc = ok(init_encoder_params(&ecfg, 0))?;
    let model = ok(init_nsp_params(&ncfg, 0))?;
    let models = Models {
        encoder_cfg: &ecfg,
        encoder: &enc,
        nsp_cfg: &ncfg,
        nsp: &model,
        tokenizer: &tok,
    };
    let epoch = wave(8 * 64, 0.3);
    let opts = GenerateOptions {
        guidance: ncfg.cfg_ratio,
        top_k: ncfg.top_k,
        seed: 0,
    };
    let quick = BenchConfig {
        warmups: 0,
        runs: 1,
        repeats: 1,
    };
    let big = ok(bench_models(&models, &epoch, &opts, &quick))?;
    ensure(big.steps == 10, format!("ten-scale schedule took {} steps", big.steps))?;
    ensure(big.parameters["nsp"] == nsp_params(&ncfg), "ten-scale nsp parameter count")?;
    Ok(format!(
        "3 and 10 steps; {} parameters; {:.2} ms/image, spread {:.3}",
        report.parameters_total, report.latency_ms, report.spread
    ))
}

/// Tokenizer for the ten-scale schedule, without downsampling.
fn ten_scale_tokenizer(schedule: ScaleSchedule) -> TokenizerConfig {
    TokenizerConfig {
        image_size: schedule.final_size().0,
        schedule,
        ..TokenizerConfig::default()
    }
}

// ---------------------------------------------------------------------------
// 8. determinism

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "png")) {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_8(first: &Path, second: &Path) -> Outcome {
    let cfg = desk_config();
    ok(stages::run_all(&cfg, &Layout::new(second)))?;
    let (a, b) = (files(first), files(second));
    ensure(!a.is_empty() && a == b, "the two runs wrote different file sets")?;
    for rel in &a {
        let same = std::fs::read(first.join(rel)).ok() == std::fs::read(second.join(rel)).ok();
        ensure(same, format!("{} differs between runs", rel.display()))?;
    }

    let layout = Layout::new(first);
    for stage in ["tokenizer", "align", "nsp"] {
        let path = layout.checkpoint(stage);
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let ck = ok(Checkpoint::load(&path))?;
        ensure(ok(ck.to_bytes())? == bytes, format!("{stage} checkpoint does not re-serialize identically"))?;
        let other = ok(Checkpoint::load(&Layout::new(second).checkpoint(stage)))?;
        ensure(ck == other, format!("{stage} checkpoints differ between runs"))?;
    }
    let data = ok(eegvis_core::pipeline::Dataset::load(&layout.dataset()))?;
    let prep = ok(stages::Prepared::new(&cfg, data))?;
    let enc = ok(stages::load_encoder(&cfg, &layout))?;
    let epoch = prep.epoch(&prep.test[0]);
    let e1 = ok(encoder::encode(epoch, &cfg.encoder, &enc))?;
    let e2 = ok(encoder::encode(epoch, &cfg.encoder, &ok(stages::load_encoder(&cfg, &Layout::new(second)))?))?;
    ensure(e1 == e2, "reloaded encoders disagree")?;
    let tok = ok(stages::load_tokenizer(&cfg, &layout))?;
    let model = ok(stages::load_nsp(&cfg, &layout))?;
    let opts = GenerateOptions {
        guidance: cfg.generate.guidance,
        top_k: cfg.generate.top_k,
        seed: stages::sample_seed(cfg.seed, 0),
    };
    let g = ok(nsp::generate(&e1, &cfg.nsp, &model, &tok, &opts))?;
    let regen = first.with_extension("regen.png");
    ok(g.image.write_png(&regen))?;
    let same = std::fs::read(&regen).ok() == std::fs::read(layout.final_png(0)).ok();
    ensure(same, "regenerating sample 0 from reloaded checkpoints differs from the saved image")?;
    Ok(format!("{} CSV/PNG files byte-identical; checkpoints reload bit-exact", a.len()))
}

// ---------------------------------------------------------------------------
// 9. analysis outputs

fn criterion_9(root: &Path) -> Outcome {
    let cfg = desk_config();
    let layout = Layout::new(root);
    let k = cfg.nsp.schedule.len();
    let (_, rows) = ok(read_csv(&layout.manifest()))?;
    let samples: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    ensure(!samples.is_empty(), "no generated samples")?;
    for i in 0..samples.len() {
        for s in 1..=k {
            ensure(layout.scale_png(i, s).is_file(), format!("missing {}", layout.scale_png(i, s).display()))?;
        }
        ensure(layout.final_png(i).is_file(), format!("missing {}", layout.final_png(i).display()))?;
    }
    let (header, rows) = ok(read_csv(&layout.region_scale()))?;
    let col = |n: &str| header.iter().position(|h| h == n).unwrap();
    let (scale, sim, cum) = (col("scale"), col("sim"), col("cumulative_delta"));
    let mut regions = 0;
    let mut worst = 0.0f64;
    for r in rows.iter().filter(|r| r[scale] == k.to_string()) {
        let a: f64 = r[sim].parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
        let b: f64 = r[cum].parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
        worst = worst.max((a - b).abs());
        regions += 1;
    }
    ensure(regions > 0, "region × scale table is empty")?;
    ensure(worst < 1e-12, format!("Σ Δ_k deviates from sim_K by {worst:.3e}"))?;
    Ok(format!("{} samples × ({k} scales + final); {regions} regions telescope within {worst:.1e}", samples.len()))
}

// ---------------------------------------------------------------------------

/// Writes past the test harness's output capture.
fn report(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn run(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    match outcome {
        Ok(detail) => {
            report(&format!("criterion {n}: PASS ({detail})"));
            true
        }
        Err(why) => {
            report(&format!("criterion {n}: FAIL ({why})"));
            false
        }
    }
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let results = [
        run(1, criterion_1),
        run(2, criterion_2),
        run(3, criterion_3),
        run(4, criterion_4),
        run(5, || criterion_5(&first)),
        run(6, criterion_6),
        run(7, || criterion_7(&first)),
        run(8, || criterion_8(&first, &second)),
        run(9, || criterion_9(&first)),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
