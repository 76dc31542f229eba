use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::objectives::frame_mse;
use crate::synthdata::{generate_corpus, mse_floor, CorpusConfig};
use crate::trainer::{train_with_pool, ArchConfig, SystemSpec, TrainConfig};

fn serial() -> Pool {
    Pool::with_threads(1).unwrap()
}

fn tiny_config() -> CorpusConfig {
    CorpusConfig {
        styles: 3,
        sequences_per_style: 8,
        vocab_size: 5,
        min_len: 4,
        max_len: 7,
        embedding_dim: 3,
        output_dim: 3,
        style_dim: 3,
        split_fractions: [0.5, 0.25, 0.25],
        seed: 5,
        ..CorpusConfig::default()
    }
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        hidden: crate::nets::HiddenSizes { feedforward: 6, recurrent: 4 },
        latent_dim: 2,
        codebook_size: 4,
        ..ArchConfig::default()
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig { max_epochs: 3, patience: 3, batch_size: 6, ..TrainConfig::default() }
}

#[test]
fn separated_clusters_never_disagree() {
    let mut pts = Vec::new();
    for i in 0..10 {
        pts.push((vec![i as f64 * 0.01, 0.0], 0));
        pts.push((vec![100.0 + i as f64 * 0.01, 0.0], 1));
    }
    let c = knn_disagreement(&pts, 3).unwrap();
    assert_eq!((c.nearest_disagree, c.any_disagree), (0, 0));
}

#[test]
fn alternating_lattice_always_disagrees() {
    let pts: Vec<(Vec<f64>, usize)> = (0..11).map(|i| (vec![i as f64], i % 2)).collect();
    let c = knn_disagreement(&pts, 2).unwrap();
    assert_eq!(c.nearest_disagree, 11);
    assert_eq!(c.any_disagree, 11);
    assert!(matches!(knn_disagreement(&pts, 11), Err(Error::Config { .. })));
    assert!(matches!(knn_disagreement(&pts, 0), Err(Error::Config { .. })));
}

fn knn_reference(points: &[(Vec<f64>, usize)], k: usize) -> (usize, usize) {
    let mut nn = 0;
    let mut any = 0;
    for (i, (zi, li)) in points.iter().enumerate() {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, (zj, _))| (zi.iter().zip(zj).map(|(a, b)| (a - b).powi(2)).sum(), j))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        nn += (points[all[0].1].1 != *li) as usize;
        any += all[..k].iter().any(|&(_, j)| points[j].1 != *li) as usize;
    }
    (nn, any)
}

#[test]
fn knn_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for round in 0..20 {
        let n = 5 + round * 7;
        let pts: Vec<(Vec<f64>, usize)> = (0..n)
            .map(|_| {
                // coarse grid so exact ties occur
                let z = (0..3).map(|_| rng.random_range(0..4) as f64).collect();
                (z, rng.random_range(0..3))
            })
            .collect();
        for k in [1, 3] {
            let c = knn_disagreement(&pts, k).unwrap();
            assert_eq!((c.nearest_disagree, c.any_disagree), knn_reference(&pts, k));
        }
    }
}

#[test]
fn cluster_examples() {
    let perfect = [(0, 0, 0), (1, 0, 0), (2, 1, 1), (3, 1, 1)];
    let m = cluster_metrics(&perfect).unwrap();
    assert_eq!(m.purity, 1.0);
    assert!((m.nmi - 1.0).abs() < 1e-12);
    let crossed = [(0, 0, 0), (1, 1, 0), (2, 0, 1), (3, 1, 1)];
    let m = cluster_metrics(&crossed).unwrap();
    assert_eq!(m.purity, 0.5);
    assert!(m.nmi.abs() < 1e-12);
    assert_eq!(m.total_indices, 2);
    assert!(m.per_label.iter().all(|u| (u.entropy_bits - 1.0).abs() < 1e-12));
    assert!(cluster_metrics(&[]).is_err());
}

#[test]
fn nmi_by_hand() {
    // clusters {0: A A B, 1: B}; p(c0)=3/4, p(A)=p(B)=1/2
    // I = 1/2 log2(4/3) + 1/4 log2(2/3) + 1/4 log2(2)
    let a = [(0, 0, 0), (1, 0, 0), (2, 0, 1), (3, 1, 1)];
    let m = cluster_metrics(&a).unwrap();
    let mi = 0.5 * (4.0f64 / 3.0).log2() + 0.25 * (2.0f64 / 3.0).log2() + 0.25;
    assert!((m.nmi - mi / 1.0).abs() < 1e-12);
    assert_eq!(m.purity, 0.75);
}

#[test]
fn frobenius_examples() {
    let i7 = ConfusionMatrix::identity(7);
    assert_eq!(confusion_frobenius(&i7, &i7).unwrap(), 0.0);
    let uniform = ConfusionMatrix { rows: vec![vec![1.0 / 7.0; 7]; 7] };
    assert!((confusion_frobenius(&uniform, &i7).unwrap() - 6f64.sqrt()).abs() < 1e-12);
    assert!(confusion_frobenius(&ConfusionMatrix::identity(3), &i7).is_err());
}

#[test]
fn noise_free_natural_data_classifies_perfectly() {
    let corpus = generate_corpus(&CorpusConfig { noise_std: 0.0, sequences_per_style: 20, ..CorpusConfig::default() }).unwrap();
    let m = oracle_classify(&natural_stimuli(&corpus), Some(&corpus.truth)).unwrap();
    assert_eq!(m, ConfusionMatrix::identity(7));
    assert!(matches!(oracle_classify(&[], None), Err(Error::MissingArtifact(_))));
}

#[test]
fn off_diagonal_mass_shrinks_with_noise() {
    let off = |noise: f64| {
        let cfg = CorpusConfig { noise_std: noise, style_norm: 0.15, sequences_per_style: 100, ..CorpusConfig::default() };
        let corpus = generate_corpus(&cfg).unwrap();
        let m = oracle_classify(&natural_stimuli(&corpus), Some(&corpus.truth)).unwrap();
        for row in &m.rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        confusion_frobenius(&m, &ConfusionMatrix::identity(7)).unwrap()
    };
    let (loud, quiet) = (off(0.6), off(0.1));
    assert!(loud > 0.0);
    assert!(quiet < loud, "{quiet} {loud}");
}

#[test]
fn oracle_decoder_sits_at_the_floor() {
    let cfg = CorpusConfig::default();
    let corpus = generate_corpus(&cfg).unwrap();
    for split in Split::ALL {
        let (mut se, mut frames) = (0.0, 0);
        for s in corpus.split(split) {
            let mean = corpus.truth.mean_output(&s.l, &corpus.truth.style_vectors[s.label]);
            se += frame_mse(&mean, &s.x_tensor()).unwrap() * s.len() as f64;
            frames += s.len();
        }
        let mse = se / frames as f64;
        assert!((mse / mse_floor(&cfg) - 1.0).abs() < 0.03, "{split:?} {mse}");
    }
}

#[test]
fn pca_collinear_points() {
    let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
    let p = pca_project(&pts).unwrap();
    assert!(p.explained[1] <= 1e-10);
    assert!((p.explained[0] - 1.0).abs() < 1e-12);
    assert!(pca_project(&pts[..2]).is_err());
}

#[test]
fn pca_matches_covariance_eigenvectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let d = 4;
        let scales = [3.0, 2.0, 1.0, 0.5];
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..d).map(|j| scales[j] * rng.random_range(-1.0..1.0) + 0.3 * j as f64).collect())
            .collect();
        let p = pca_project(&pts).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let dot: f64 = p.axes[a].iter().zip(&p.axes[b]).map(|(x, y)| x * y).sum();
                assert!((dot - (a == b) as u8 as f64).abs() <= 1e-10);
            }
        }
        let n = pts.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n).collect();
        let cov = nalgebra::DMatrix::from_fn(d, d, |i, j| {
            pts.iter().map(|p| (p[i] - mean[i]) * (p[j] - mean[j])).sum::<f64>() / n
        });
        let eig = SymmetricEigen::new(cov);
        let mut idx: Vec<usize> = (0..d).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        // projector onto the oracle's top-2 subspace applied to each axis
        for axis in &p.axes {
            let mut residual = axis.clone();
            for &k in &idx[..2] {
                let v = eig.eigenvectors.column(k);
                let c: f64 = axis.iter().zip(v.iter()).map(|(x, y)| x * y).sum();
                residual.iter_mut().zip(v.iter()).for_each(|(r, y)| *r -= c * y);
            }
            let sin = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
            assert!(sin <= 1e-6, "{sin}");
        }
        let top: f64 = idx[..2].iter().map(|&k| eig.eigenvalues[k]).sum();
        let all: f64 = eig.eigenvalues.iter().sum();
        assert!((p.explained[0] + p.explained[1] - top / all).abs() < 1e-10);
        for axis in &p.axes {
            let lead = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0);
        }
    }
}

#[test]
fn scheme_names_parse() {
    for s in Scheme::ALL {
        assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
    }
    assert!(matches!("per-speaker".parse::<Scheme>(), Err(Error::Config { .. })));
}

#[test]
fn per_style_mean_of_constant_latents() {
    let corpus = generate_corpus(&tiny_config()).unwrap();
    let ck = train_with_pool(&SystemSpec::new(SystemId::Hzi, tiny_arch()), &corpus, &tiny_train(), &serial()).unwrap();
    let mut model = ck.model().unwrap();
    let table = model.tables.get_mut(&Split::Train).unwrap();
    let ids: Vec<usize> = table.entries.keys().copied().collect();
    for id in ids {
        let label = corpus.sequences[id].label;
        table.set(id, vec![label as f64, -0.5]);
    }
    let data = prepare(&corpus);
    let means = style_means(&model, &data, &serial()).unwrap();
    for (k, m) in means.iter().enumerate() {
        assert_eq!(m.as_deref(), Some(&[k as f64, -0.5][..]));
    }
}

#[test]
fn per_utterance_heuristic_reuses_stored_test_latents() {
    let corpus = generate_corpus(&tiny_config()).unwrap();
    let ck = train_with_pool(&SystemSpec::new(SystemId::Hsi, tiny_arch()), &corpus, &tiny_train(), &serial()).unwrap();
    let model = ck.model().unwrap();
    let out = control_scheme_outputs(&model, &corpus, Scheme::PerUtterance, &serial()).unwrap();
    assert_eq!(out.len(), corpus.split(Split::Test).count());
    for s in &out {
        let z = ck.latent_tables[&Split::Test].get(s.id).unwrap();
        let want = model.synthesize(&corpus.sequences[s.id].l_tensor(5), Some(z)).unwrap();
        assert_eq!(s.output, want);
    }
    let bot = train_with_pool(&SystemSpec::new(SystemId::Bot, tiny_arch()), &corpus, &tiny_train(), &serial()).unwrap();
    let bot = bot.model().unwrap();
    assert!(control_scheme_outputs(&bot, &corpus, Scheme::PerStyle, &serial()).is_err());
    assert_eq!(system_stimuli(&bot, &corpus, Scheme::PerStyle, &serial()).unwrap().len(), out.len());
}

#[test]
fn single_style_vq_schemes_agree_with_one_live_codeword() {
    let corpus = generate_corpus(&CorpusConfig { styles: 1, ..tiny_config() }).unwrap();
    let arch = ArchConfig { codebook_size: 1, ..tiny_arch() };
    let ck = train_with_pool(&SystemSpec::new(SystemId::Vqs, arch), &corpus, &tiny_train(), &serial()).unwrap();
    let model = ck.model().unwrap();
    let a = control_scheme_outputs(&model, &corpus, Scheme::PerUtterance, &serial()).unwrap();
    let b = control_scheme_outputs(&model, &corpus, Scheme::PerStyle, &serial()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mse_table_matches_history_and_is_repeatable() {
    let corpus = generate_corpus(&tiny_config()).unwrap();
    let cks: Vec<Checkpoint> = [SystemId::Bot, SystemId::Vqr, SystemId::Hzi]
        .into_iter()
        .map(|id| train_with_pool(&SystemSpec::new(id, tiny_arch()), &corpus, &tiny_train(), &serial()).unwrap())
        .collect();
    let rows = mse_table(&cks, &corpus, &serial()).unwrap();
    for (r, ck) in rows.iter().zip(&cks) {
        let best = ck.best_record().unwrap();
        assert_eq!((r.train_mse, r.val_mse, r.test_mse), (best.train_mse, best.val_mse, best.test_mse));
        assert_eq!(r.best_epoch, ck.epoch);
    }
    assert_eq!(mse_table(&cks, &corpus, &serial()).unwrap(), rows);
    let other = generate_corpus(&CorpusConfig { seed: 6, ..tiny_config() }).unwrap();
    assert!(matches!(mse_table(&cks, &other, &serial()), Err(Error::Mismatch(_))));
}

#[test]
fn reports_have_expected_headers() {
    let rows = vec![MetricsRow { system: SystemId::Hzi, params: 10, best_epoch: 3, train_mse: 0.5, val_mse: 0.25, test_mse: 0.125 }];
    assert_eq!(metrics_csv(&rows), "system,params,best_epoch,train_mse,val_mse,test_mse\nHZI,10,3,0.5,0.25,0.125\n");
    let m = cluster_metrics(&[(0, 0, 0), (1, 0, 0), (2, 1, 1), (3, 1, 1)]).unwrap();
    let c = cluster_report_csv(&[(SystemId::Vqs, m)]);
    assert!(c.starts_with(NMI_NOTE));
    assert!(c.contains("\nVQS,2,1,1\n"), "{c}");
    let conf = confusion_csv(&ConfusionMatrix::identity(2));
    assert_eq!(conf, "prompted,classified_0,classified_1\n0,1,0\n1,0,1\n");
    let s = vec![ScatterRow { system: SystemId::Hzi, id: 4, label: 1, z: vec![0.5, -1.0], pc: [1.0, 2.0] }];
    assert_eq!(scatter_csv(&s), "system,id,label,z_1,z_2,pc1,pc2\nHZI,4,1,0.5,-1,1,2\n");
    assert!(scatter_svg(&s).starts_with("<svg"));
    let h = vec![crate::trainer::EpochRecord { epoch: 1, train_mse: 1.0, val_mse: 1.0, test_mse: 1.0, latent_warnings: 0 }];
    assert!(learning_curves_svg(&[(SystemId::Bot, h)]).contains("polyline"));
}
