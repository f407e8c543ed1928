use latticeloss::experiment::{sweep, sweep_csv, verify, SweepConfig, VerifyConfig};
use latticeloss::toy::{average_curve, train_all, Method, TrainConfig};
use latticeloss::{Error, PenaltyConfig, PenaltySide};

#[test]
fn sweep_d_avg_is_monotone_per_trial() {
    let cfg = SweepConfig {
        lambdas: vec![0.0, 0.0015, 0.003, 0.006, 0.0075, 0.01, 0.05, 0.1, 0.5],
        trials: 10,
        seed: 4,
        ..Default::default()
    };
    let rows = sweep(&cfg).unwrap();
    assert_eq!(rows.len(), cfg.lambdas.len() * cfg.trials);
    for trial in 0..cfg.trials {
        let per: Vec<_> = rows.iter().filter(|r| r.trial == trial).collect();
        for w in per.windows(2) {
            assert!(w[0].lambda < w[1].lambda);
            assert!(w[1].d_avg.unwrap() >= w[0].d_avg.unwrap() - 1e-12);
            assert!(w[1].viterbi_delay >= w[0].viterbi_delay);
            // the penalized optimum trades unpenalized score for delay
            assert!(w[1].loss >= w[0].loss - 1e-12);
        }
    }
}

#[test]
fn sweep_reports_na_beyond_the_oracle_budget() {
    let cfg = SweepConfig {
        lambdas: vec![0.0, 0.01],
        trials: 2,
        frames: 60,
        tokens: 12,
        vocab: 5,
        seed: 1,
    };
    let rows = sweep(&cfg).unwrap();
    assert!(rows.iter().all(|r| r.d_avg.is_none()));
    let csv = sweep_csv(&rows);
    assert!(csv
        .lines()
        .skip(2)
        .all(|l| l.split(',').nth(2) == Some("NA")));
}

#[test]
fn sweep_validates_config() {
    for cfg in [
        SweepConfig {
            lambdas: vec![],
            ..Default::default()
        },
        SweepConfig {
            lambdas: vec![0.01, 0.0],
            ..Default::default()
        },
        SweepConfig {
            lambdas: vec![-0.1],
            ..Default::default()
        },
        SweepConfig {
            trials: 0,
            ..Default::default()
        },
        SweepConfig {
            vocab: 1,
            ..Default::default()
        },
    ] {
        assert!(matches!(sweep(&cfg), Err(Error::InvalidConfig(_))));
    }
}

#[test]
fn verify_passes_and_detects_perturbation() {
    let clean = verify(&VerifyConfig {
        corpus: 40,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    assert!(clean.passed(), "{clean}");
    let bad = verify(&VerifyConfig {
        corpus: 40,
        seed: 3,
        perturb: 1e-6,
        ..Default::default()
    })
    .unwrap();
    assert!(!bad.passed());
    assert!(!bad.check("loss_vs_oracle").unwrap().passed);
    assert!(!bad.check("grad_vs_oracle").unwrap().passed);
}

#[test]
fn blank_side_training_tracks_the_unpenalized_run() {
    let cfg = TrainConfig {
        epochs: 4,
        warmup_epochs: 1,
        seeds: vec![0, 1],
        ..Default::default()
    };
    let base = Method::DelayPenalty(PenaltyConfig::new(0.0));
    let blank = Method::DelayPenalty(PenaltyConfig::new(0.2).with_side(PenaltySide::Blank));
    let nonblank = Method::DelayPenalty(PenaltyConfig::new(0.2));
    let runs = train_all(&cfg, &[base, blank, nonblank]).unwrap();
    let (b, k, n) = (
        average_curve(&runs, base),
        average_curve(&runs, blank),
        average_curve(&runs, nonblank),
    );
    for (x, y) in b.iter().zip(&k) {
        assert!((x.1 - y.1).abs() < 1e-9, "held-out loss {} vs {}", x.1, y.1);
        assert!((x.2 - y.2).abs() < 1e-9);
    }
    assert!(n.last().unwrap().2 < b.last().unwrap().2);
}
