//! Library outputs against independent scalar recomputations.

mod common;

use common::{random_motion, rng, uniform};
use facestream::audio::{resample_to_frames, AudioFeatureSequence};
use facestream::codec::{quantize, stage1_loss, Codebook};
use facestream::diffusion::{add_noise, build_schedule, ddim_sample, ddim_timesteps, time_features, Denoiser};
use facestream::metrics::{fdd, lve, lve_with, mouth_open_diff, LveMode, RegionSpec};
use facestream::motion::MotionSequence;
use facestream::predictor::alibi_slopes;
use facestream::tensor::{attention, Tensor};
use facestream::training::stage2_loss;
use facestream::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

pub fn two_by_two_softmax_attention() {
    let q = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
    let k = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
    let v = Tensor::new(&[2, 1], vec![10.0, 20.0]).unwrap();
    let out = attention(&q, &k, &v, None, None).unwrap();
    for (i, qi) in [1.0f64, 2.0].iter().enumerate() {
        let logits = [qi * 1.0, qi * 0.0];
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let expect = (logits[0].exp() * 10.0 + logits[1].exp() * 20.0) / z;
        assert!(close(out.data()[i], expect, 1e-14));
    }
    assert!(close(out.data()[0], 10.0 + 10.0 / (1.0 + 1f64.exp()), 1e-14));
}

fn exhaustive_nearest(entries: &Tensor, z: &[f64]) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for i in 0..entries.rows() {
        let d: f64 = entries.row(i).iter().zip(z).map(|(c, x)| (c - x).powi(2)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

pub fn quantizer_matches_exhaustive_scan() {
    let entries = uniform(&[8, 4], 1);
    let cb = Codebook::new(entries.clone()).unwrap();
    let z = uniform(&[100, 4], 2);
    let grid = quantize(&z, &cb, 4).unwrap();
    for r in 0..100 {
        assert_eq!(grid.indices[r], exhaustive_nearest(&entries, z.row(r)));
        assert_eq!(&grid.rows().row(r), &entries.row(grid.indices[r]));
    }
}

pub fn stage1_loss_scalar_oracle() {
    let (x, xh) = (uniform(&[5, 6], 3), uniform(&[5, 6], 4));
    let (z, q) = (uniform(&[4, 3], 5), uniform(&[4, 3], 6));
    let l = stage1_loss(&x, &xh, &z, &q).unwrap();
    let rec = x.data().iter().zip(xh.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 30.0;
    let sq = z.data().iter().zip(q.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 12.0;
    assert!(close(l.rec, rec, 1e-14));
    assert!(close(l.quant, 1.25 * sq, 1e-14));
    assert!(close(l.total, rec + 1.25 * sq, 1e-14));

    let ones = Tensor::full(&[4, 3], 1.0);
    let zero = Tensor::zeros(&[4, 3]);
    let l = stage1_loss(&x, &x, &ones, &zero).unwrap();
    assert_eq!((l.rec, l.quant, l.total), (0.0, 1.25, 1.25));
}

pub fn resampling_matches_piecewise_linear_evaluation() {
    let src = uniform(&[5, 3], 7);
    let feat = AudioFeatureSequence::new(src.clone(), 50.0).unwrap();
    let out = resample_to_frames(&feat, 7).unwrap();
    for k in 0..7 {
        let pos = k as f64 * 4.0 / 6.0;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(4);
        let w = pos - lo as f64;
        for c in 0..3 {
            let expect = (1.0 - w) * src.row(lo)[c] + w * src.row(hi)[c];
            assert!(close(out.row(k)[c], expect, 1e-14), "row {k} col {c}");
        }
    }
    let constant = AudioFeatureSequence::new(Tensor::full(&[4, 2], 0.3), 50.0).unwrap();
    assert!(resample_to_frames(&constant, 11).unwrap().data().iter().all(|v| *v == 0.3));
}

pub fn schedule_products() {
    let s = build_schedule(1000, 0.00085, 0.012).unwrap();
    assert_eq!(s.beta()[0], 0.00085);
    assert_eq!(s.beta()[999], 0.012);
    let mut acc = 1.0;
    for t in 0..1000 {
        let b = if t == 0 {
            0.00085
        } else if t == 999 {
            0.012
        } else {
            let (a, c) = (0.00085f64.sqrt(), 0.012f64.sqrt());
            (a + (t as f64 / 999.0) * (c - a)).powi(2)
        };
        assert!(close(s.beta()[t], b, 1e-15));
        acc *= 1.0 - b;
        assert!(close(s.alpha_bar()[t], acc, 1e-13));
    }
    assert!(close(s.alpha_bar()[0], 0.99915, 1e-15));
    assert!(close(s.alpha_bar()[499], 0.277_669_650_456_467_63, 1e-12));
    assert!(close(s.alpha_bar()[999], 0.004_660_098_513_077_236, 1e-12));
    assert!(close(s.beta()[500], 0.004_814_954_141_711_88, 1e-12));
}

pub fn add_noise_closed_form_and_variance_law() {
    let s = build_schedule(1000, 0.00085, 0.012).unwrap();
    let t = (0..1000).min_by(|&a, &b| (s.alpha_bar()[a] - 0.25).abs().total_cmp(&(s.alpha_bar()[b] - 0.25).abs())).unwrap();
    let ab = s.alpha_bar()[t];
    let z = add_noise(&s, &Tensor::scalar(1.0), t, &Tensor::scalar(2.0)).unwrap();
    assert!(close(z.item().unwrap(), ab.sqrt() + (1.0 - ab).sqrt() * 2.0, 1e-15));

    let mut r = rng(8);
    let n = 10_000;
    let z0 = Tensor::full(&[n], 0.7);
    let eps = Tensor::from_fn(&[n], |_| r.sample(StandardNormal));
    let zt = add_noise(&s, &z0, 300, &eps).unwrap();
    let ab = s.alpha_bar()[300];
    let resid: Vec<f64> = zt.data().iter().map(|v| v - ab.sqrt() * 0.7).collect();
    let mean = resid.iter().sum::<f64>() / n as f64;
    let var = resid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "variance ratio {}", var / (1.0 - ab));
}

pub fn timestep_subsequences() {
    let ts = ddim_timesteps(1000, 50).unwrap();
    assert_eq!(&ts[..5], &[999, 979, 959, 939, 919]);
    assert_eq!(*ts.last().unwrap(), 19);
    assert_eq!(ddim_timesteps(1000, 7).unwrap(), vec![999, 857, 714, 571, 428, 285, 142]);
    assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![999]);
    assert_eq!(ddim_timesteps(1000, 1000).unwrap(), (0..1000).rev().collect::<Vec<_>>());
}

struct Smooth;

impl Denoiser for Smooth {
    fn denoise(&self, z_t: &[f64], t: usize, cond: &[f64]) -> Result<Vec<f64>> {
        Ok(z_t.iter().enumerate().map(|(i, z)| (0.5 * z + cond[i % cond.len()] + t as f64 / 1000.0).tanh()).collect())
    }
}

pub fn ddim_update_scalar_oracle() {
    let s = build_schedule(1000, 0.00085, 0.012).unwrap();
    let cond = [0.3, -0.2, 0.1];
    for steps in [1, 2, 10, 50] {
        let got = ddim_sample(&Smooth, &s, &cond, 6, steps, 99).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let mut z: Vec<f64> = (0..6).map(|_| r.sample(StandardNormal)).collect();
        let stride = 1000 / steps;
        let mut x0 = Vec::new();
        for i in 0..steps {
            let t = 999 - i * stride;
            x0 = Smooth.denoise(&z, t, &cond).unwrap();
            if i + 1 < steps {
                let prev = 999 - (i + 1) * stride;
                let (a, p) = (s.alpha_bar()[t], s.alpha_bar()[prev]);
                for (zi, x) in z.iter_mut().zip(&x0) {
                    let e = (*zi - a.sqrt() * x) / (1.0 - a).sqrt();
                    *zi = p.sqrt() * x + (1.0 - p).sqrt() * e;
                }
            }
        }
        assert_eq!(got.denoise_calls, steps);
        for (a, b) in got.z0.iter().zip(&x0) {
            assert!(close(*a, *b, 1e-13), "steps {steps}");
        }
    }
}

pub fn alibi_slopes_are_geometric() {
    for heads in 1..=8 {
        let s = alibi_slopes(heads);
        for (k, m) in s.iter().enumerate() {
            assert_eq!(*m, 2f64.powf(-8.0 * (k + 1) as f64 / heads as f64));
        }
    }
}

pub fn time_features_pairs() {
    let f = time_features(7, 6);
    for k in 0..3 {
        let w = 7.0 / 10000f64.powf(2.0 * k as f64 / 6.0);
        assert!(close(f.data()[2 * k], w.sin(), 1e-15));
        assert!(close(f.data()[2 * k + 1], w.cos(), 1e-15));
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn vtx(m: &MotionSequence, t: usize, v: usize) -> Vec<f64> {
    m.offsets()[(t * m.vertices() + v) * 3..(t * m.vertices() + v) * 3 + 3].to_vec()
}

fn region(seed: u64) -> RegionSpec {
    let mut r = rng(seed);
    RegionSpec {
        lip_indices: vec![0, 2, 3],
        upper_face_indices: vec![5, 6, 1],
        mouth_pair: (2, 3),
        mouth_rest_gap: [r.gen_range(-0.1..0.1), r.gen_range(0.2..0.4), 0.0],
    }
}

pub fn lve_exhaustive_scan() {
    let (p, g) = (random_motion(10, 8, 1), random_motion(10, 8, 2));
    let reg = region(0);
    let mut total_max = 0.0;
    let mut total_mean = 0.0;
    for t in 0..10 {
        let mut worst = 0.0f64;
        let mut sum = 0.0;
        for &v in &reg.lip_indices {
            let d = dist(&vtx(&p, t, v), &vtx(&g, t, v));
            worst = worst.max(d);
            sum += d;
        }
        total_max += worst;
        total_mean += sum / 3.0;
    }
    assert!(close(lve(&p, &g, &reg).unwrap(), total_max / 10.0, 1e-14));
    assert!(close(lve_with(&p, &g, &reg, LveMode::Mean).unwrap(), total_mean / 10.0, 1e-14));
}

fn std_of(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn fdd_three_frame_two_vertex_fixture() {
    let p = MotionSequence::new(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0, 3.0, 0.0, 1.0, 0.0], 25.0)
        .unwrap();
    let g = MotionSequence::new(3, 2, vec![0.5; 18], 25.0).unwrap();
    let reg = RegionSpec { lip_indices: vec![0], upper_face_indices: vec![0, 1], mouth_pair: (0, 1), mouth_rest_gap: [0.0; 3] };
    let dyn0 = std_of(&[1.0, 2.0, 3.0]);
    let dyn1 = std_of(&[0.0, 5.0, 1.0]);
    assert!(close(fdd(&p, &g, &reg).unwrap(), (dyn0 + dyn1) / 2.0, 1e-14));
    assert!(close(fdd(&g, &p, &reg).unwrap(), -(dyn0 + dyn1) / 2.0, 1e-14));
}

fn opening(m: &MotionSequence, t: usize, reg: &RegionSpec) -> f64 {
    let (u, l) = reg.mouth_pair;
    let (a, b) = (vtx(m, t, u), vtx(m, t, l));
    let d: Vec<f64> = (0..3).map(|c| reg.mouth_rest_gap[c] + a[c] - b[c]).collect();
    dist(&d, &[0.0; 3])
}

/// Five random fixtures against loops written from the definitions.
pub fn metric_fixtures() {
    for seed in 0..5 {
        let frames = 6 + seed as usize;
        let (p, g) = (random_motion(frames, 8, 10 + seed), random_motion(frames, 8, 20 + seed));
        let reg = region(seed);
        let lve_ref =
            (0..frames).map(|t| reg.lip_indices.iter().map(|&v| dist(&vtx(&p, t, v), &vtx(&g, t, v))).fold(0.0, f64::max)).sum::<f64>()
                / frames as f64;
        let dyn_of = |m: &MotionSequence, v: usize| std_of(&(0..frames).map(|t| dist(&vtx(m, t, v), &[0.0; 3])).collect::<Vec<_>>());
        let fdd_ref = reg.upper_face_indices.iter().map(|&v| dyn_of(&p, v) - dyn_of(&g, v)).sum::<f64>() / 3.0;
        let mod_ref = (0..frames).map(|t| (opening(&p, t, &reg) - opening(&g, t, &reg)).abs()).sum::<f64>() / frames as f64;
        assert!((lve(&p, &g, &reg).unwrap() - lve_ref).abs() < 1e-10);
        assert!((fdd(&p, &g, &reg).unwrap() - fdd_ref).abs() < 1e-10);
        assert!((mouth_open_diff(&p, &g, &reg).unwrap() - mod_ref).abs() < 1e-10);
        assert_eq!(lve(&p, &p, &reg).unwrap(), 0.0);
        assert_eq!(fdd(&p, &p, &reg).unwrap(), 0.0);
        assert_eq!(mouth_open_diff(&p, &p, &reg).unwrap(), 0.0);
    }
}

pub fn stage2_loss_scalar_oracle() {
    let (zp, zq) = (uniform(&[3, 8], 30), uniform(&[3, 8], 31));
    let (xp, x) = (uniform(&[6, 9], 32), uniform(&[6, 9], 33));
    let l = stage2_loss(&zp, &zq, &xp, &x).unwrap();
    let latent = zp.data().iter().zip(zq.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 24.0;
    let vert = xp.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 54.0;
    let mut vel = 0.0;
    for t in 1..6 {
        for c in 0..9 {
            let dp = xp.row(t)[c] - xp.row(t - 1)[c];
            let dx = x.row(t)[c] - x.row(t - 1)[c];
            vel += (dp - dx).powi(2);
        }
    }
    vel /= 45.0;
    assert!(close(l.latent, latent, 1e-14));
    assert!(close(l.vert, vert, 1e-14));
    assert!(close(l.vel, vel, 1e-14));
    assert!(close(l.total, latent + vert + vel, 1e-14));

    let shifted = Tensor::new(x.shape(), x.data().iter().map(|v| v + 0.5).collect()).unwrap();
    let l = stage2_loss(&zq, &zq, &shifted, &x).unwrap();
    assert_eq!(l.latent, 0.0);
    assert!(l.vel.abs() < 1e-28);
    assert!(close(l.vert, 0.25, 1e-14));
}

mod cases {
    #[test]
    fn two_by_two_softmax_attention() {
        super::two_by_two_softmax_attention()
    }

    #[test]
    fn quantizer_matches_exhaustive_scan() {
        super::quantizer_matches_exhaustive_scan()
    }

    #[test]
    fn stage1_loss_scalar_oracle() {
        super::stage1_loss_scalar_oracle()
    }

    #[test]
    fn resampling_matches_piecewise_linear_evaluation() {
        super::resampling_matches_piecewise_linear_evaluation()
    }

    #[test]
    fn schedule_products() {
        super::schedule_products()
    }

    #[test]
    fn add_noise_closed_form_and_variance_law() {
        super::add_noise_closed_form_and_variance_law()
    }

    #[test]
    fn timestep_subsequences() {
        super::timestep_subsequences()
    }

    #[test]
    fn ddim_update_scalar_oracle() {
        super::ddim_update_scalar_oracle()
    }

    #[test]
    fn alibi_slopes_are_geometric() {
        super::alibi_slopes_are_geometric()
    }

    #[test]
    fn time_features_pairs() {
        super::time_features_pairs()
    }

    #[test]
    fn lve_exhaustive_scan() {
        super::lve_exhaustive_scan()
    }

    #[test]
    fn fdd_three_frame_two_vertex_fixture() {
        super::fdd_three_frame_two_vertex_fixture()
    }

    #[test]
    fn metric_fixtures() {
        super::metric_fixtures()
    }

    #[test]
    fn stage2_loss_scalar_oracle() {
        super::stage2_loss_scalar_oracle()
    }
}
