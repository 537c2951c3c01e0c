use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

// ------------------------------------------------- mean attention distance

fn uniform_attn(batch: usize, heads: usize, l: usize) -> Vec<f64> {
    vec![1.0 / l as f64; batch * heads * l * l]
}

/// All-pairs mean distance on a gh x gw grid, enumerated directly.
fn all_pairs_mean(gh: usize, gw: usize) -> f64 {
    let l = gh * gw;
    let mut s = 0.0;
    for q in 0..l {
        for j in 0..l {
            let dy = (q / gw) as f64 - (j / gw) as f64;
            let dx = (q % gw) as f64 - (j % gw) as f64;
            s += (dy * dy + dx * dx).sqrt();
        }
    }
    s / (l * l) as f64
}

#[test]
fn identity_attention_has_zero_distance() {
    let l = 9;
    let mut attn = vec![0.0; 2 * 3 * l * l];
    for m in attn.chunks_mut(l * l) {
        for q in 0..l {
            m[q * l + q] = 1.0;
        }
    }
    let d = mean_attention_distance(&attn, 2, 3, 3, 3).unwrap();
    assert!(d.iter().all(|&v| v == 0.0));
}

#[test]
fn single_patch_grid_is_zero() {
    let d = mean_attention_distance(&[1.0, 1.0], 1, 2, 1, 1).unwrap();
    assert_eq!(d, vec![0.0, 0.0]);
}

#[test]
fn uniform_attention_matches_all_pairs_enumeration() {
    // 2x2: per query the distances are {0, 1, 1, sqrt(2)}, so the mean is
    // (2 + sqrt(2)) / 4 = 0.8535533905932737.
    let d = mean_attention_distance(&uniform_attn(1, 1, 4), 1, 1, 2, 2).unwrap();
    assert!((d[0] - (2.0 + 2.0f64.sqrt()) / 4.0).abs() < 1e-9);
    assert!((d[0] - all_pairs_mean(2, 2)).abs() < 1e-9);
    for (gh, gw) in [(3, 3), (4, 2), (5, 7)] {
        let l = gh * gw;
        let d = mean_attention_distance(&uniform_attn(2, 3, l), 2, 3, gh, gw).unwrap();
        for v in d {
            assert!((v - all_pairs_mean(gh, gw)).abs() < 1e-9, "{gh}x{gw}");
        }
    }
}

#[test]
fn distances_bounded_by_grid_diameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (gh, gw, l) = (4usize, 6usize, 24usize);
    let mut attn = vec![0.0; 2 * l * l];
    for row in attn.chunks_mut(l) {
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    let diam = (((gh - 1) * (gh - 1) + (gw - 1) * (gw - 1)) as f64).sqrt();
    for v in mean_attention_distance(&attn, 1, 2, gh, gw).unwrap() {
        assert!((0.0..=diam).contains(&v));
    }
}

#[test]
fn unnormalized_rows_are_rejected() {
    let attn = vec![0.3; 4]; // 1x1x2x2, rows sum to 0.6
    assert!(matches!(
        mean_attention_distance(&attn, 1, 1, 2, 1),
        Err(Error::Data(_))
    ));
}

#[test]
fn distance_is_invariant_to_head_and_batch_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, h, l) = (3usize, 2usize, 4usize);
    let mut attn = vec![0.0; b * h * l * l];
    for row in attn.chunks_mut(l) {
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = rng.gen_range(0.1..1.0);
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    let base = mean_attention_distance(&attn, b, h, 2, 2).unwrap();
    // Swap the two heads in every image: per-head vector swaps.
    let mut sw = attn.clone();
    for bi in 0..b {
        let off = bi * h * l * l;
        let (a0, a1) = sw[off..off + 2 * l * l].split_at_mut(l * l);
        a0.swap_with_slice(a1);
    }
    let swapped = mean_attention_distance(&sw, b, h, 2, 2).unwrap();
    assert!((base[0] - swapped[1]).abs() < 1e-12 && (base[1] - swapped[0]).abs() < 1e-12);
    // Reverse batch order: identical report.
    let mut rev = vec![0.0; attn.len()];
    for bi in 0..b {
        let src = bi * h * l * l;
        let dst = (b - 1 - bi) * h * l * l;
        rev[dst..dst + h * l * l].copy_from_slice(&attn[src..src + h * l * l]);
    }
    let r = mean_attention_distance(&rev, b, h, 2, 2).unwrap();
    for (x, y) in base.iter().zip(&r) {
        assert!((x - y).abs() < 1e-12);
    }
}

// ----------------------------------------------------------- Fourier bins

/// Naive O(N^2) DFT amplitude oracle.
fn dft_amp(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut amp = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * std::f64::consts::PI
                        * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                    re += map[y * w + x] * ang.cos();
                    im += map[y * w + x] * ang.sin();
                }
            }
            amp[u * w + v] = (re * re + im * im).sqrt();
        }
    }
    amp
}

/// Reference implementation of the binned relative spectrum from a naive DFT.
fn spectrum_oracle(features: &[f64], b: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let nbins = h.min(w).div_ceil(2);
    let rmax = 0.5f64.sqrt();
    let mut acc = vec![0.0; nbins];
    let mut cnt = vec![0u64; nbins];
    for map in features.chunks(h * w) {
        let amp = dft_amp(map, h, w);
        let dc = (amp[0] + SPECTRUM_EPS).ln();
        for u in 0..h {
            for v in 0..w {
                if u == 0 && v == 0 {
                    continue;
                }
                let fu = u.min(h - u) as f64 / h as f64;
                let fv = v.min(w - v) as f64 / w as f64;
                let r = (fu * fu + fv * fv).sqrt() / rmax;
                let bi = ((r * nbins as f64) as usize).min(nbins - 1);
                acc[bi] += (amp[u * w + v] + SPECTRUM_EPS).ln() - dc;
                cnt[bi] += 1;
            }
        }
    }
    let _ = (b, c);
    acc.iter()
        .zip(&cnt)
        .map(|(a, &n)| if n == 0 { f64::NAN } else { a / n as f64 })
        .collect()
}

#[test]
fn constant_map_sits_at_epsilon_floor_in_every_bin() {
    let rep = fourier_log_amplitude(&vec![2.5; 8 * 8], 1, 1, 8, 8).unwrap();
    let first = rep.rel_log_amp[0];
    assert!(first < -20.0, "expected epsilon floor, got {first}");
    for v in &rep.rel_log_amp {
        assert!((v - first).abs() < 1e-9);
    }
}

#[test]
fn impulse_spectrum_is_flat_at_zero() {
    let mut map = vec![0.0; 6 * 6];
    map[0] = 1.0;
    let rep = fourier_log_amplitude(&map, 1, 1, 6, 6).unwrap();
    for v in &rep.rel_log_amp {
        assert!(v.abs() < 1e-9, "{v}");
    }
}

#[test]
fn checkerboard_energy_lands_in_the_top_bin() {
    let (h, w) = (8usize, 8usize);
    let map: Vec<f64> = (0..h * w)
        .map(|i| if (i / w + i % w) % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let rep = fourier_log_amplitude(&map, 1, 1, h, w).unwrap();
    // The Nyquist spike shares its bin with zero-amplitude frequencies, so
    // the bin mean is positive but not the raw spike height.
    let last = *rep.rel_log_amp.last().unwrap();
    assert!(last > 1.0, "top bin {last}");
    for v in &rep.rel_log_amp[..rep.rel_log_amp.len() - 1] {
        assert!(v.abs() < 1e-9, "non-top bin {v}");
    }
}

#[test]
fn fft_matches_naive_dft_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, c, h, w) = (2usize, 3usize, 6usize, 4usize);
    let feats: Vec<f64> = (0..b * c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let got = fourier_log_amplitude(&feats, b, c, h, w).unwrap().rel_log_amp;
    let want = spectrum_oracle(&feats, b, c, h, w);
    assert_eq!(got.len(), want.len());
    for (g, o) in got.iter().zip(&want) {
        assert!((g - o).abs() < 1e-9, "{g} vs {o}");
    }
}

#[test]
fn constant_offset_shifts_all_bins_uniformly() {
    // Adding a constant changes only the DC amplitude, so every nonzero
    // radius shifts by the same reference change: bin-to-bin differences are
    // invariant.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (8usize, 8usize);
    let map: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let shifted: Vec<f64> = map.iter().map(|v| v + 10.0).collect();
    let a = fourier_log_amplitude(&map, 1, 1, h, w).unwrap().rel_log_amp;
    let b = fourier_log_amplitude(&shifted, 1, 1, h, w).unwrap().rel_log_amp;
    for i in 1..a.len() {
        assert!(((a[i] - a[0]) - (b[i] - b[0])).abs() < 1e-9);
    }
}

// ------------------------------------------------------------ utilization

#[test]
fn utilization_counts_are_conserved() {
    let events = vec![
        (0usize, vec![1usize]),
        (0, vec![3]),
        (1, vec![1]),
        (1, vec![0, 2]),
    ];
    let h = expert_utilization(&events, 2, 4).unwrap();
    let total_events: u64 = events.iter().map(|(_, a)| a.len() as u64).sum();
    assert_eq!(h.total.iter().sum::<u64>(), total_events);
    assert_eq!(h.per_layer[0], vec![0, 1, 0, 1]);
    assert_eq!(h.per_layer[1], vec![1, 1, 1, 0]);
    for e in 0..4 {
        assert_eq!(h.total[e], h.per_layer[0][e] + h.per_layer[1][e]);
    }
    assert!(expert_utilization(&[(5, vec![0])], 2, 4).is_err());
    assert!(expert_utilization(&[(0, vec![9])], 2, 4).is_err());
}

#[test]
fn forced_gate_concentrates_mass() {
    // All events route to expert 2.
    let events: Vec<(usize, Vec<usize>)> = (0..50).map(|_| (0, vec![2usize])).collect();
    let h = expert_utilization(&events, 1, 4).unwrap();
    assert_eq!(h.total, vec![0, 0, 50, 0]);
}

// -------------------------------------------------------------- chi-square

#[test]
fn chi_square_detects_different_distributions() {
    let a = [100u64, 5, 5, 5];
    let b = [5u64, 100, 5, 5];
    let p = chi_square_p(&a, &b).unwrap();
    assert!(p < 1e-6, "p = {p}");
}

#[test]
fn chi_square_accepts_same_distribution() {
    let a = [50u64, 48, 52, 51];
    let b = [49u64, 51, 50, 50];
    let p = chi_square_p(&a, &b).unwrap();
    assert!(p > 0.5, "p = {p}");
}

#[test]
fn chi_square_reference_values() {
    // df = 1: statistic for [[10, 20], [20, 10]] is 6.666...;
    // p = Q(0.5, 3.333...) ~ 0.009823.
    let p = chi_square_p(&[10, 20], &[20, 10]).unwrap();
    assert!((p - 0.0098).abs() < 5e-4, "p = {p}");
    assert!(chi_square_p(&[1, 2], &[1]).is_err());
    assert!(chi_square_p(&[0, 0], &[1, 1]).is_err());
}

// -------------------------------------------------------------------- PGM

#[test]
fn pgm_roundtrip_header_and_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.pgm");
    let data = vec![0.0, 0.5, 1.0, 0.25];
    write_pgm(&path, &data, 2, 2).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header = b"P5\n2 2\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let pix = &bytes[header.len()..];
    assert_eq!(pix.len(), 4);
    assert_eq!(pix[0], 0);
    assert_eq!(pix[2], 255);
}
