// Checks are written so that a NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! One PASS/FAIL line per acceptance criterion. Every tolerance is a named
//! constant below. Oracles here are written from the definitions and share
//! no code with the library beyond its public entry points.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use g3dhf_annotate::{Durability, Service, ServiceConfig, SessionState, SubmitRequest};
use g3dhf_core::agreement::{krcc, plcc, srcc, srcc_closed_form, PairedScores};
use g3dhf_core::bench::{evaluate_predictor, make_splits, EvalConfig, EvalInputs, ScorePrediction};
use g3dhf_core::loss::{bce_loss, combined_loss, l1_loss, LossComponents, LossWeights, DEFAULT_LOSS_EPSILON};
use g3dhf_core::model::{DatasetManifest, Dimension, ItemId, ManifestItem, Point, RatingRecord};
use g3dhf_core::mos::{aggregate_mos, screen_subjects, RejectionReason, ScreeningPolicy};
use g3dhf_core::saliency::{gaussian_blur, kernel_radius, FixationMap, Norm, SaliencyMap};
use g3dhf_core::saliency_metrics::{auc_judd, kld, nss, sim};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CORR_TOL: f64 = 1e-12;
const CORR_PAIRS: usize = 1000;
const CORR_TIME_LIMIT: Duration = Duration::from_secs(5);
const MOS_HAND_TOL: f64 = 0.001;
const MOS_AFFINE_TOL: f64 = 1e-9;
const MOS_TABLES: usize = 100;
const BLUR_MASS_TOL: f64 = 1e-6;
const BLUR_SYMMETRY_TOL: f64 = 1e-12;
const BLUR_ORACLE_TOL: f64 = 1e-9;
const NSS_TOL: f64 = 1e-12;
const SIM_TOL: f64 = 1e-12;
const KLD_IDENTITY_TOL: f64 = 1e-6;
const KLD_PAIRS: usize = 1000;
const AUC_RANDOM_4X4_MAPS: usize = 150;
const LOSS_TOL: f64 = 1e-12;
const BCE_TOL: f64 = 1e-12;
const SPLIT_ITEMS: usize = 2000;
const DURABILITY_EVENTS: usize = 10_000;
const DURABILITY_PREFIXES: usize = 100;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn tie_free(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut seen = BTreeSet::new();
    while seen.len() < n {
        seen.insert(rng.gen_range(-1_000_000i64..1_000_000));
    }
    let mut v: Vec<f64> = seen.into_iter().map(|x| x as f64 / 1000.0).collect();
    v.shuffle(rng);
    v
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

/// Rank of each value among tie-free values, 1-based.
fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 1.0 + x.iter().filter(|w| *w < v).count() as f64).collect()
}

fn oracle_kendall(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let p = (x[i] - x[j]) * (y[i] - y[j]);
            if p > 0.0 {
                s += 1;
            } else if p < 0.0 {
                s -= 1;
            }
        }
    }
    s as f64 / (n * (n - 1) / 2) as f64
}

fn correlation_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..CORR_PAIRS)
        .map(|_| {
            let n = rng.gen_range(2..=12);
            (tie_free(&mut rng, n), tie_free(&mut rng, n))
        })
        .collect();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (x, y) in &pairs {
        let p = PairedScores::new(x.clone(), y.clone()).map_err(|e| e.to_string())?;
        let got = [
            srcc(&p).map_err(|e| e.to_string())?,
            plcc(&p).map_err(|e| e.to_string())?,
            krcc(&p),
        ];
        let want = [
            oracle_pearson(&oracle_ranks(x), &oracle_ranks(y)),
            oracle_pearson(x, y),
            oracle_kendall(x, y),
        ];
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    let elapsed = start.elapsed();
    ensure!(worst <= CORR_TOL, "max deviation {worst:e} > {CORR_TOL:e}");
    ensure!(elapsed < CORR_TIME_LIMIT, "took {elapsed:?}");
    Ok(format!("{CORR_PAIRS} pairs, max |diff| {worst:.1e}, {elapsed:.2?}"))
}

fn srcc_closed_form_cross_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..CORR_PAIRS {
        let n = rng.gen_range(2..=12);
        let p = PairedScores::new(tie_free(&mut rng, n), tie_free(&mut rng, n)).unwrap();
        let closed = srcc_closed_form(&p).ok_or("closed form refused tie-free input")?;
        worst = worst.max((closed - srcc(&p).unwrap()).abs());
    }
    ensure!(worst <= CORR_TOL, "max deviation {worst:e}");
    Ok(format!("{CORR_PAIRS} pairs, max |diff| {worst:.1e}"))
}

fn krcc_hand_case() -> Check {
    let p = PairedScores::new(vec![1.0, 2.0, 3.0], vec![2.0, 1.0, 3.0]).unwrap();
    let k = krcc(&p);
    ensure!(k == 1.0 / 3.0, "krcc = {k}");
    Ok(format!("krcc = {k}"))
}

fn rating(subject: &str, item: &str, dimension: Dimension, score: f64) -> RatingRecord {
    RatingRecord {
        subject_id: subject.into(),
        item_id: ItemId::new(item),
        dimension,
        score,
        timestamp: DateTime::from_timestamp(1_700_000_000, 0).unwrap(),
    }
}

fn mos_pipeline() -> Check {
    let mut recs = Vec::new();
    for s in ["s1", "s2"] {
        for d in Dimension::ALL {
            recs.push(rating(s, "A", d, 1.0));
            recs.push(rating(s, "B", d, 3.0));
        }
    }
    let t = aggregate_mos(&recs, &ScreeningPolicy::None).map_err(|e| e.to_string())?;
    for d in Dimension::ALL {
        let a = t.get(&ItemId::new("A"), d).ok_or("A missing")?;
        let b = t.get(&ItemId::new("B"), d).ok_or("B missing")?;
        ensure!((a - 38.215).abs() <= MOS_HAND_TOL && (b - 61.785).abs() <= MOS_HAND_TOL, "{d}: A={a} B={b}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut constant_checks = 0;
    for _ in 0..MOS_TABLES {
        let subjects = rng.gen_range(2..=8);
        let items = rng.gen_range(3..=10);
        let mut table = Vec::new();
        for s in 0..subjects {
            for d in Dimension::ALL {
                // two distinct anchors keep every subject's variance positive
                table.push(rating(&format!("s{s}"), "i0", d, 0.5));
                table.push(rating(&format!("s{s}"), "i1", d, 4.5));
                for i in 2..items {
                    table.push(rating(&format!("s{s}"), &format!("i{i}"), d, rng.gen_range(0..=50) as f64 / 10.0));
                }
            }
        }
        let maps: Vec<(f64, f64)> = (0..subjects)
            .map(|_| {
                let a = rng.gen_range(0.1..=1.0);
                (a, rng.gen_range(0.0..=5.0 * (1.0 - a)))
            })
            .collect();
        let moved: Vec<RatingRecord> = table
            .iter()
            .map(|r| {
                let s: usize = r.subject_id[1..].parse().unwrap();
                let (a, b) = maps[s];
                RatingRecord {
                    score: (a * r.score + b).clamp(0.0, 5.0),
                    ..r.clone()
                }
            })
            .collect();
        let t0 = aggregate_mos(&table, &ScreeningPolicy::None).map_err(|e| e.to_string())?;
        let t1 = aggregate_mos(&moved, &ScreeningPolicy::None).map_err(|e| e.to_string())?;
        ensure!(t0.entries.len() == t1.entries.len(), "entry count changed");
        for (k, e) in &t0.entries {
            worst = worst.max((e.mos - t1.entries[k].mos).abs());
        }

        let c = rng.gen_range(0..=50) as f64 / 10.0;
        let mut with_constant = table.clone();
        for d in Dimension::ALL {
            for i in 0..items {
                with_constant.push(rating("flat", &format!("i{i}"), d, c));
            }
        }
        for policy in [ScreeningPolicy::None, ScreeningPolicy::std_dev_outlier(), ScreeningPolicy::itu_annex2()] {
            let out = screen_subjects(&with_constant, &policy);
            ensure!(
                out.rejected.get("flat").is_some_and(|r| r.iter().any(|x| matches!(x, RejectionReason::DegenerateVariance { .. }))),
                "constant rater kept under {}",
                policy.name()
            );
            constant_checks += 1;
        }
    }
    ensure!(worst <= MOS_AFFINE_TOL, "affine deviation {worst:e}");
    Ok(format!(
        "A=38.215 B=61.785, {MOS_TABLES} affine tables max |diff| {worst:.1e}, constant rater rejected {constant_checks}/{constant_checks}"
    ))
}

fn gaussian_saliency() -> Check {
    const N: u32 = 64;
    const SIGMA: f64 = 5.0;
    let (cx, cy) = (30i64, 33i64);
    let fix = FixationMap::from_points(N, N, &[Point::new(cx, cy)]).unwrap();
    let map = gaussian_blur(&fix, SIGMA).map_err(|e| e.to_string())?;
    let mass = map.sum();
    ensure!((mass - 1.0).abs() <= BLUR_MASS_TOL, "mass {mass}");

    let r = kernel_radius(SIGMA) as i64;
    ensure!(r == 15, "radius {r}");
    let mut worst_rot = 0.0f64;
    for dy in -r..=r {
        for dx in -r..=r {
            let a = map.get((cx + dx) as u32, (cy + dy) as u32);
            let b = map.get((cx - dy) as u32, (cy + dx) as u32);
            worst_rot = worst_rot.max((a - b).abs());
        }
    }
    ensure!(worst_rot <= BLUR_SYMMETRY_TOL, "rotation asymmetry {worst_rot:e}");

    // dense 2-D convolution with the same truncated, renormalized kernel
    let mut k2 = vec![0.0; ((2 * r + 1) * (2 * r + 1)) as usize];
    for dy in -r..=r {
        for dx in -r..=r {
            k2[((dy + r) * (2 * r + 1) + dx + r) as usize] = (-((dx * dx + dy * dy) as f64) / (2.0 * SIGMA * SIGMA)).exp();
        }
    }
    let ksum: f64 = k2.iter().sum();
    let mut worst_dense = 0.0f64;
    for y in 0..N as i64 {
        for x in 0..N as i64 {
            let mut want = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sx, sy) = (x - dx, y - dy);
                    if sx >= 0 && sy >= 0 && sx < N as i64 && sy < N as i64 && fix.get(sx as u32, sy as u32) {
                        want += k2[((dy + r) * (2 * r + 1) + dx + r) as usize] / ksum;
                    }
                }
            }
            worst_dense = worst_dense.max((map.get(x as u32, y as u32) - want).abs());
        }
    }
    ensure!(worst_dense <= BLUR_ORACLE_TOL, "dense oracle deviation {worst_dense:e}");
    Ok(format!("mass err {:.1e}, rotation {worst_rot:.1e}, dense oracle {worst_dense:.1e}", (mass - 1.0).abs()))
}

/// ROC by explicit thresholds: every distinct value plus +inf, points sorted
/// by FPR, trapezoids summed. Returns the doubled area numerator and its
/// denominator so the comparison stays in integers.
fn oracle_auc(values: &[f64], positive: &[bool]) -> f64 {
    let pos = positive.iter().filter(|p| **p).count() as u64;
    let neg = positive.len() as u64 - pos;
    let mut thresholds: Vec<f64> = values.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let mut points: Vec<(u64, u64)> = thresholds
        .iter()
        .map(|t| {
            let tp = values.iter().zip(positive).filter(|(v, p)| **p && *v >= t).count() as u64;
            let fp = values.iter().zip(positive).filter(|(v, p)| !**p && *v >= t).count() as u64;
            (fp, tp)
        })
        .collect();
    points.push((0, 0));
    points.push((neg, pos));
    points.sort();
    points.dedup();
    let mut doubled = 0u64;
    for w in points.windows(2) {
        doubled += (w[1].0 - w[0].0) * (w[0].1 + w[1].1);
    }
    doubled as f64 / (2 * pos * neg) as f64
}

fn fixation_subsets(cells: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 1u32..(1 << cells) {
        if (mask.count_ones() as usize) <= max && (mask.count_ones() as usize) < cells {
            out.push((0..cells).filter(|i| mask & (1 << i) != 0).collect());
        }
    }
    out
}

fn check_auc(w: u32, h: u32, values: &[f64], subset: &[usize]) -> Result<(), String> {
    let mut fix = FixationMap::empty(w, h);
    let mut positive = vec![false; values.len()];
    for &c in subset {
        fix.set(c as u32 % w, c as u32 / w);
        positive[c] = true;
    }
    let map = SaliencyMap::new(w, h, values.to_vec(), Norm::Raw).unwrap();
    let got = auc_judd(&map, &fix).map_err(|e| e.to_string())?;
    let want = oracle_auc(values, &positive);
    if got != want {
        return Err(format!("{values:?} fix {subset:?}: auc {got} vs brute force {want}"));
    }
    Ok(())
}

fn saliency_metrics() -> Check {
    // every 2x2 map over the ten levels with every fixation set of size 1..=3
    let subsets2 = fixation_subsets(4, 3);
    let mut cases = 0usize;
    for code in 0..10_000u32 {
        let values: Vec<f64> = (0..4).map(|i| ((code / 10u32.pow(i)) % 10) as f64 / 10.0).collect();
        for s in &subsets2 {
            check_auc(2, 2, &values, s)?;
            cases += 1;
        }
    }
    // random 4x4 maps, each with every fixation set of size 1..=3
    let subsets4: Vec<Vec<usize>> = fixation_subsets(16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..AUC_RANDOM_4X4_MAPS {
        let values: Vec<f64> = (0..16).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
        for s in &subsets4 {
            check_auc(4, 4, &values, s)?;
            cases += 1;
        }
    }

    // fixations sitting exactly at the map mean give NSS = 0
    let mut worst_nss = 0.0f64;
    for _ in 0..100 {
        let fixed: BTreeSet<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..16)).collect();
        let mut values: Vec<f64> = (0..16).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
        let others: Vec<f64> = (0..16).filter(|i| !fixed.contains(i)).map(|i| values[i]).collect();
        if others.iter().all(|v| *v == others[0]) {
            values[(0..16).find(|i| !fixed.contains(i)).unwrap()] += 0.5;
        }
        let others: Vec<f64> = (0..16).filter(|i| !fixed.contains(i)).map(|i| values[i]).collect();
        let mean = others.iter().sum::<f64>() / others.len() as f64;
        let mut fix = FixationMap::empty(4, 4);
        for &i in &fixed {
            values[i] = mean;
            fix.set(i as u32 % 4, i as u32 / 4);
        }
        let map = SaliencyMap::new(4, 4, values, Norm::Raw).unwrap();
        worst_nss = worst_nss.max(nss(&map, &fix).map_err(|e| e.to_string())?.abs());
    }
    ensure!(worst_nss <= NSS_TOL, "nss at mean {worst_nss:e}");

    let random_map = |rng: &mut ChaCha8Rng| {
        let (w, h) = (rng.gen_range(2..=12), rng.gen_range(2..=12));
        let data: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>() + if rng.gen_bool(0.2) { 0.0 } else { 1e-3 }).collect();
        let s: f64 = data.iter().sum();
        SaliencyMap::new(w, h, data.into_iter().map(|v| v / s).collect(), Norm::SumOne).unwrap()
    };
    let mut worst_sim = 0.0f64;
    let mut worst_kld_id = 0.0f64;
    let mut min_kld = f64::INFINITY;
    for _ in 0..KLD_PAIRS {
        let a = random_map(&mut rng);
        let data: Vec<f64> = (0..a.data().len()).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = data.iter().sum();
        let b = SaliencyMap::new(a.width(), a.height(), data.into_iter().map(|v| v / s).collect(), Norm::SumOne).unwrap();
        worst_sim = worst_sim.max((sim(&a, &a).map_err(|e| e.to_string())? - 1.0).abs());
        worst_kld_id = worst_kld_id.max(kld(&a, &a).map_err(|e| e.to_string())?);
        min_kld = min_kld.min(kld(&a, &b).map_err(|e| e.to_string())?).min(kld(&b, &a).map_err(|e| e.to_string())?);
    }
    ensure!(worst_sim <= SIM_TOL, "sim identity off by {worst_sim:e}");
    ensure!(worst_kld_id <= KLD_IDENTITY_TOL, "kld identity {worst_kld_id:e}");
    ensure!(min_kld >= 0.0, "negative kld {min_kld:e}");
    Ok(format!(
        "auc {cases} brute-force cases exact (all 2x2 maps + random 4x4 maps, every fixation set <=3; full 4x4 enumeration infeasible), nss@mean {worst_nss:.1e}, sim id {worst_sim:.1e}, kld id {worst_kld_id:.1e}, min kld {min_kld:.2e} over {KLD_PAIRS} pairs"
    ))
}

fn loss_bundle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst_l1 = 0.0f64;
    for _ in 0..200 {
        let (w, h) = (rng.gen_range(2..=10), rng.gen_range(2..=10));
        let n = (w * h) as usize;
        let pred = SaliencyMap::new(w, h, (0..n).map(|_| rng.gen::<f64>()).collect(), Norm::Raw).unwrap();
        let gt = SaliencyMap::new(w, h, (0..n).map(|_| rng.gen::<f64>()).collect(), Norm::Raw).unwrap();
        let only_l1 = combined_loss(&pred, &gt, &LossWeights::new(1.0, 0.0, 0.0, 0.0).unwrap()).map_err(|e| e.to_string())?;
        worst_l1 = worst_l1.max((only_l1 - l1_loss(pred.data(), gt.data()).unwrap()).abs());

        let wts = LossWeights::new(rng.gen(), rng.gen(), rng.gen(), rng.gen()).unwrap();
        let base = combined_loss(&pred, &gt, &wts).unwrap();
        let c = LossComponents::compute(pred.data(), gt.data(), DEFAULT_LOSS_EPSILON).unwrap();
        let by_hand = wts.l1 * c.l1 + wts.cc * c.cc + wts.kl * c.kl + wts.bce * c.bce;
        ensure!(base == by_hand, "combined {base} != weighted components {by_hand}");
        for k in [2.0, 4.0, 0.5, 1024.0] {
            let scaled = combined_loss(&pred, &gt, &wts.scaled(k)).unwrap();
            ensure!(scaled == k * base, "scaling weights by {k}: {scaled} != {}", k * base);
        }
        let zero = combined_loss(&pred, &gt, &LossWeights::new(0.0, 0.0, 0.0, 0.0).unwrap()).unwrap();
        ensure!(zero == 0.0, "zero weights gave {zero}");
    }
    ensure!(worst_l1 <= LOSS_TOL, "l1 projection off by {worst_l1:e}");
    let bce = bce_loss(&[0.5; 4], &[0.5; 4]).unwrap();
    ensure!((bce - std::f64::consts::LN_2).abs() <= BCE_TOL, "bce {bce}");
    Ok(format!("l1 projection {worst_l1:.1e}, linearity exact on 200 pairs, bce(0.5,0.5) = {bce}"))
}

fn harness_determinism() -> Check {
    // uneven strata so per-stratum balance is actually tested
    let tags = [("eg3d", 730), ("panohead", 560), ("next3d", 421), ("gaussian", 289)];
    let mut items = Vec::new();
    for (tag, count) in tags {
        for i in 0..count {
            items.push(ManifestItem::new(format!("{tag}-{i:04}"), tag));
        }
    }
    ensure!(items.len() == SPLIT_ITEMS, "synthetic manifest has {} items", items.len());
    let manifest = DatasetManifest::new(items).unwrap();
    let a = make_splits(&manifest, 5, 42).map_err(|e| e.to_string())?;
    let b = make_splits(&manifest, 5, 42).map_err(|e| e.to_string())?;
    ensure!(a.to_json().as_bytes() == b.to_json().as_bytes(), "split JSON differs between runs");
    ensure!(a.fold_sizes() == vec![400; 5], "fold sizes {:?}", a.fold_sizes());
    for f in 0..5 {
        ensure!(a.test_items(f).len() == 400 && a.train_items(f).len() == 1600, "fold {f} is not 400/1600");
    }
    for (tag, _) in tags {
        let mut counts = [0usize; 5];
        for item in manifest.items.iter().filter(|i| i.model_tag == tag) {
            counts[a.folds[&item.id]] += 1;
        }
        let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
        ensure!(spread <= 1, "stratum {tag} fold counts {counts:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut mos = g3dhf_core::mos::MosTable::read_csv("item_id,dimension,mos,n_subjects\n".as_bytes()).map_err(|e| e.to_string())?;
    let mut preds = BTreeMap::new();
    for item in &manifest.items {
        let q = rng.gen_range(0.0..100.0);
        let au = rng.gen_range(0.0..100.0);
        mos.entries.insert((item.id.clone(), Dimension::Quality), g3dhf_core::mos::MosEntry { mos: q, n_subjects: 15 });
        mos.entries.insert((item.id.clone(), Dimension::Authenticity), g3dhf_core::mos::MosEntry { mos: au, n_subjects: 15 });
        preds.insert(item.id.clone(), ScorePrediction { quality: q, authenticity: au });
    }
    let report = evaluate_predictor("oracle", &EvalInputs::scores_only(&mos, &preds), &a, &EvalConfig::default(), "acceptance")
        .map_err(|e| e.to_string())?;
    for f in &report.folds {
        for d in Dimension::ALL {
            let c = f.metrics.correlation(d).ok_or("missing correlation")?;
            ensure!(c.srcc == 1.0 && c.plcc == 1.0 && c.krcc == 1.0, "fold {} {d}: {c:?}", f.fold);
        }
    }
    Ok("5 folds x 400, strata balanced, byte-identical, oracle scores 1.0 on every fold".into())
}

/// Image width, height and clicked points.
type ExpectedMarks = (u32, u32, Vec<(i64, i64)>);

#[derive(Debug, PartialEq)]
struct Expected {
    ratings: BTreeMap<(String, String, String), (f64, DateTime<Utc>)>,
    fixations: BTreeMap<(String, String), ExpectedMarks>,
    labels: BTreeMap<(String, String), (BTreeSet<String>, String)>,
}

/// Latest-wins fold over raw JSON lines, without the library's event types.
fn oracle_export(log: &[u8]) -> Expected {
    let complete_part = match log.iter().rposition(|b| *b == b'\n') {
        Some(i) => &log[..=i],
        None => &log[..0],
    };
    let mut session_state: BTreeMap<String, String> = BTreeMap::new();
    let mut subs: Vec<(serde_json::Value, DateTime<Utc>)> = Vec::new();
    for line in complete_part.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
        let v: serde_json::Value = serde_json::from_slice(line).expect("complete line parses");
        let ev = &v["event"];
        let sid = ev["session_id"].as_str().unwrap().to_owned();
        match ev["type"].as_str().unwrap() {
            "session_created" => {
                session_state.insert(sid, "active".into());
            }
            "navigated" => {
                session_state.insert(sid, ev["state"].as_str().unwrap().to_owned());
            }
            "submitted" => {
                let at: DateTime<Utc> = v["at"].as_str().unwrap().parse().unwrap();
                subs.push((ev.clone(), at));
            }
            other => panic!("unknown event {other}"),
        }
    }
    let mut out = Expected {
        ratings: BTreeMap::new(),
        fixations: BTreeMap::new(),
        labels: BTreeMap::new(),
    };
    let mut distortion: BTreeMap<(String, String), serde_json::Value> = BTreeMap::new();
    for (ev, at) in &subs {
        let subject = ev["subject_id"].as_str().unwrap().to_owned();
        let item = ev["item_id"].as_str().unwrap().to_owned();
        if session_state[ev["session_id"].as_str().unwrap()] == "complete" {
            for dim in ["quality", "authenticity"] {
                if let Some(s) = ev[dim].as_f64() {
                    out.ratings.insert((subject.clone(), item.clone(), dim.to_owned()), (s, *at));
                }
            }
        }
        let has_part = ev.get("marks").is_some() || ev.get("categories").is_some() || ev.get("description").is_some();
        if has_part {
            distortion.insert((item, subject), ev.clone());
        }
    }
    for (key, ev) in distortion {
        if let Some(marks) = ev["marks"].as_array() {
            let size = ev["image_size"].as_array().unwrap();
            let pts = marks.iter().map(|m| (m["x"].as_i64().unwrap(), m["y"].as_i64().unwrap())).collect();
            out.fixations.insert(key.clone(), (size[0].as_u64().unwrap() as u32, size[1].as_u64().unwrap() as u32, pts));
        }
        if let Some(cats) = ev["categories"].as_array() {
            let names = cats.iter().map(|c| c.as_str().unwrap().to_owned()).collect();
            let desc = ev["description"].as_str().unwrap_or("").to_owned();
            out.labels.insert(key, (names, desc));
        }
    }
    out
}

fn observed(export: &g3dhf_annotate::Export) -> Expected {
    Expected {
        ratings: export
            .ratings
            .iter()
            .map(|r| ((r.subject_id.clone(), r.item_id.0.clone(), r.dimension.as_str().to_owned()), (r.score, r.timestamp)))
            .collect(),
        fixations: export
            .fixations
            .iter()
            .map(|f| {
                (
                    (f.item_id.0.clone(), f.annotator_id.clone()),
                    (f.image_width, f.image_height, f.points.iter().map(|p| (p.x, p.y)).collect()),
                )
            })
            .collect(),
        labels: export
            .labels
            .iter()
            .map(|l| {
                (
                    (l.item_id.0.clone(), l.annotator_id.clone()),
                    (l.categories.iter().map(|c| c.canonical_name().to_owned()).collect(), l.description.clone()),
                )
            })
            .collect(),
    }
}

fn durability_manifest() -> DatasetManifest {
    DatasetManifest::new(
        (0..25)
            .map(|i| {
                let mut m = ManifestItem::new(format!("item{i:02}"), "eg3d");
                m.snapshot_width = Some(300);
                m.snapshot_height = Some(100);
                m
            })
            .collect(),
    )
    .unwrap()
}

fn service_durability() -> Check {
    const CATEGORIES: [&str; 4] = ["Eye Distortions", "Mouth Distortions", "Hair Distortions", "No Distortion"];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let live = dir.path().join("live");
    let mut cfg = ServiceConfig::new(&live);
    cfg.durability = Durability::Buffered;
    let svc = Service::open(durability_manifest(), cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut submitted = 0usize;
    let mut rejected = 0usize;
    let mut active: Vec<String> = Vec::new();
    while submitted < DURABILITY_EVENTS {
        if active.len() < 6 {
            let subject = format!("subj{:02}", rng.gen_range(0..40));
            if let Ok(s) = svc.create_session(&subject, rng.gen_range(0..4)) {
                if s.state == SessionState::Active && !active.contains(&s.session_id) {
                    active.push(s.session_id);
                }
            }
            continue;
        }
        let idx = rng.gen_range(0..active.len());
        let sid = active[idx].clone();
        let roll = rng.gen_range(0..100);
        if roll < 8 {
            let d = svc.advance(&sid).map_err(|e| e.to_string())?;
            if d.state == SessionState::Complete {
                active.swap_remove(idx);
            }
        } else if roll < 11 {
            svc.retreat(&sid).map_err(|e| e.to_string())?;
        } else {
            let item = svc.current(&sid).map_err(|e| e.to_string())?.item_id;
            let mut req = SubmitRequest {
                item_id: item,
                ..Default::default()
            };
            let kind = rng.gen_range(0..10);
            if kind < 7 {
                req.quality = Some(rng.gen_range(0..=50) as f64 / 10.0);
                req.authenticity = Some(rng.gen_range(0..=50) as f64 / 10.0);
            } else if kind == 7 {
                req.quality = Some(rng.gen_range(0.0..=5.0));
            }
            if kind >= 6 {
                req.marks = (0..rng.gen_range(0..4)).map(|_| Point::new(rng.gen_range(0..300), rng.gen_range(0..100))).collect();
                req.categories = vec![CATEGORIES[rng.gen_range(0..3)].into()];
                if rng.gen_bool(0.5) {
                    req.description = Some(format!("note {}", rng.gen_range(0..1000)));
                }
            }
            if kind == 9 && rng.gen_bool(0.3) {
                req.quality = Some(5.0 + rng.gen_range(0.01..1.0));
            }
            match svc.submit(&sid, &req) {
                Ok(_) => submitted += 1,
                Err(g3dhf_annotate::AnnotateError::Validation(_)) => rejected += 1,
                Err(e) => return Err(e.to_string()),
            }
        }
    }
    let before_crash = svc.export();
    let log = std::fs::read(live.join(g3dhf_annotate::service::LOG_FILE)).map_err(|e| e.to_string())?;
    drop(svc);

    let mut cuts: Vec<usize> = (0..DURABILITY_PREFIXES - 2).map(|_| rng.gen_range(0..=log.len())).collect();
    cuts.push(0);
    cuts.push(log.len());
    for (n, cut) in cuts.iter().enumerate() {
        let crash_dir = dir.path().join(format!("crash{n}"));
        std::fs::create_dir_all(&crash_dir).unwrap();
        std::fs::write(crash_dir.join(g3dhf_annotate::service::LOG_FILE), &log[..*cut]).unwrap();
        let mut cfg = ServiceConfig::new(&crash_dir);
        cfg.durability = Durability::Buffered;
        let replayed = Service::open(durability_manifest(), cfg).map_err(|e| format!("replay of {cut}-byte prefix failed: {e}"))?;
        let got = replayed.export();
        let want = oracle_export(&log[..*cut]);
        ensure!(observed(&got) == want, "export after {cut}-byte prefix disagrees with the log-fold oracle");
        if *cut == log.len() {
            ensure!(
                got.ratings_jsonl() == before_crash.ratings_jsonl()
                    && got.fixations_json() == before_crash.fixations_json()
                    && got.labels_json() == before_crash.labels_json(),
                "full replay export differs from the pre-crash export"
            );
        }
        std::fs::remove_dir_all(&crash_dir).ok();
    }
    Ok(format!(
        "{submitted} submissions ({rejected} rejected), {} byte log, {DURABILITY_PREFIXES} prefixes replayed and matched, {} ratings at full length",
        log.len(),
        before_crash.ratings.len()
    ))
}

type Criterion = (&'static str, fn() -> Check);

fn main() {
    let criteria: [Criterion; 9] = [
        ("correlation oracle equivalence", correlation_oracles),
        ("srcc closed form cross-check", srcc_closed_form_cross_check),
        ("krcc hand case", krcc_hand_case),
        ("mos pipeline", mos_pipeline),
        ("gaussian saliency", gaussian_saliency),
        ("saliency metrics", saliency_metrics),
        ("loss bundle", loss_bundle),
        ("harness determinism", harness_determinism),
        ("service durability", service_durability),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} [{:.2?}]", start.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
