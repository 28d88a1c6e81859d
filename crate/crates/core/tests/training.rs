mod common;

use common::{small_preset, PRESET_WIDTH};
use deeplde::network::Mlp;
use deeplde::oracle::solve_dataset;
use deeplde::problems::{generate_dataset, generate_instance, Dataset, ObjectiveKind, SplitKind};
use deeplde::reporting::{evaluate, evaluate_predictions, learning_curve_tsv};
use deeplde::training::{dual_update, train_deeplde, train_ldf, train_supervised, Phase, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mid_dataset(kind: ObjectiveKind) -> Dataset {
    let inst = generate_instance(16, 8, 6, kind, 31).unwrap();
    generate_dataset(inst, 240, 32).unwrap()
}

fn short_cfg() -> TrainConfig {
    TrainConfig {
        outer_iterations: 4,
        inner_iterations: 3,
        warmup_iterations: 3,
        inner_increment: 1,
        batch_size: 40,
        hidden_width: 16,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn warmup_loss_descends_on_small_preset() {
    let data = small_preset(ObjectiveKind::Quadratic, 1);
    let cfg = TrainConfig {
        outer_iterations: 0,
        warmup_iterations: 50,
        hidden_width: PRESET_WIDTH,
        seed: 1,
        ..TrainConfig::default()
    };
    let (_, log) = train_deeplde(&data, &cfg).unwrap();
    let (first, last) = (log.train_loss[0], log.train_loss[49]);
    assert!(last < first - 0.2 * first.abs(), "{first} -> {last}");
}

#[test]
fn dual_update_matches_recomputation() {
    let data = mid_dataset(ObjectiveKind::Quadratic);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Mlp::with_two_hidden(8, 16, 8, 0.1, &mut rng).unwrap();
    let mut lambda = vec![0.1; 6];
    dual_update(&data, &model, &mut lambda, 0.5).unwrap();

    let c = deeplde::completion::Completer::new(&data.instance).unwrap();
    let mut expected = vec![0.1; 6];
    for d in data.part(SplitKind::Train) {
        let y = c.complete(d, &model.predict(d).unwrap(), None).unwrap().y;
        for i in 0..6 {
            let gy: f64 = (0..16).map(|j| data.instance.g[(i, j)] * y[j]).sum();
            expected[i] += 0.5 * (gy - data.instance.h_ub[i]).max(0.0);
        }
    }
    for (a, b) in lambda.iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn multipliers_never_decrease() {
    let mut data = mid_dataset(ObjectiveKind::Quadratic);
    // Tighter bounds so that the multipliers actually move.
    data.instance.h_ub.iter_mut().for_each(|h| *h *= 0.2);
    let (_, log) = train_deeplde(&data, &short_cfg()).unwrap();
    let outer: Vec<f64> = log.records.iter().filter(|r| r.phase == Phase::Outer).map(|r| r.lambda_l1).collect();
    assert_eq!(outer.len(), 4);
    assert!(outer.windows(2).all(|w| w[1] >= w[0]));
    assert!(log.final_lambda.iter().all(|&l| l >= 0.1));
    assert!(outer[3] > 0.6);
}

#[test]
fn runs_are_bit_identical() {
    let data = mid_dataset(ObjectiveKind::NonlinearEq);
    let (m1, l1) = train_deeplde(&data, &short_cfg()).unwrap();
    let (m2, l2) = train_deeplde(&data, &short_cfg()).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(l1.to_csv_untimed(), l2.to_csv_untimed());
    assert_eq!(l1.final_lambda, l2.final_lambda);
}

#[test]
fn thread_count_does_not_change_results() {
    let data = mid_dataset(ObjectiveKind::Quadratic);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train_ldf(&data, &short_cfg()).unwrap())
    };
    let (m1, l1) = run(1);
    let (m3, l3) = run(3);
    assert_eq!(m1, m3);
    assert_eq!(l1.to_csv_untimed(), l3.to_csv_untimed());
}

#[test]
fn embedded_model_is_always_equality_feasible() {
    let data = mid_dataset(ObjectiveKind::NonlinearEq);
    let (_, log) = train_deeplde(&data, &short_cfg()).unwrap();
    assert!(log.records.iter().all(|r| r.eq_max <= 1e-8));
    // An untrained network is just as feasible.
    let model = Mlp::with_two_hidden(8, 16, 8, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let rep = evaluate(&data.instance, data.part(SplitKind::Test), &model, "deeplde", None, 0).unwrap().report;
    assert!(rep.max_eq <= 1e-6);
    assert!(rep.max_eq >= rep.mean_eq && rep.max_ineq >= rep.mean_ineq);
}

#[test]
fn unconstrained_ldf_minimizes_objective() {
    let data = mid_dataset(ObjectiveKind::Quadratic);
    let cfg = TrainConfig {
        outer_iterations: 0,
        warmup_iterations: 30,
        lambda0: 0.0,
        mu0: 0.0,
        batch_size: 24,
        hidden_width: 16,
        ..TrainConfig::default()
    };
    let (_, log) = train_ldf(&data, &cfg).unwrap();
    let uncon = {
        // -Q^{-1} p, the same for every input.
        let q = common::to_na(&data.instance.q);
        let p = nalgebra::DVector::from_column_slice(&data.instance.p);
        let y = -q.lu().solve(&p).unwrap();
        data.instance.objective(y.as_slice()).unwrap()
    };
    let first = log.records[0].obj_mean;
    let last = log.records.last().unwrap().obj_mean;
    assert!(last < first && last >= uncon - 1e-9);
    assert!(last - uncon < 0.5 * (first - uncon), "{first} {last} {uncon}");
}

#[test]
fn evaluation_matches_dumped_samples_and_labels() {
    let data = mid_dataset(ObjectiveKind::Quadratic);
    let labels = solve_dataset(&data).unwrap();
    let test = data.part(SplitKind::Test);
    let oracle_mean = labels.objective_mean(data.split.test.clone());

    let replay = evaluate_predictions(&data.instance, test, &labels.y_star[data.split.test.clone()], "oracle", Some(oracle_mean), 0)
        .unwrap()
        .report;
    assert!(replay.max_eq <= 1e-7 && replay.max_ineq <= 1e-7);
    assert!(replay.gap_vs_oracle_pct.unwrap().abs() <= 1e-9);

    let (model, _) = train_deeplde(&data, &short_cfg()).unwrap();
    let ev = evaluate(&data.instance, test, &model, "deeplde", Some(oracle_mean), 5).unwrap();
    // Recompute every column from the CSV dump.
    let rows: Vec<Vec<f64>> = ev
        .samples_csv()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), test.len());
    let n = rows.len() as f64;
    let obj = rows.iter().map(|r| r[1]).sum::<f64>() / n;
    let eq_max = rows.iter().map(|r| r[2]).fold(0.0, f64::max);
    let eq_mean = rows.iter().map(|r| r[3]).sum::<f64>() / (n * 8.0);
    let ineq_max = rows.iter().map(|r| r[4]).fold(0.0, f64::max);
    let ineq_mean = rows.iter().map(|r| r[5]).sum::<f64>() / (n * 6.0);
    let r = &ev.report;
    assert!((r.obj_mean - obj).abs() <= 1e-12 * (1.0 + obj.abs()));
    assert_eq!(r.max_eq, eq_max);
    assert!((r.mean_eq - eq_mean).abs() <= 1e-15);
    assert_eq!(r.max_ineq, ineq_max);
    assert!((r.mean_ineq - ineq_mean).abs() <= 1e-12);
    let gap = 100.0 * (r.obj_mean - oracle_mean) / oracle_mean.abs();
    assert!((r.gap_vs_oracle_pct.unwrap() - gap).abs() <= 1e-12);

    let again = evaluate(&data.instance, test, &model, "deeplde", Some(oracle_mean), 5).unwrap();
    assert_eq!(again.report.untimed(), ev.report.untimed());
}

#[test]
fn supervised_beats_initial_mse_tenfold() {
    let data = small_preset(ObjectiveKind::Quadratic, 2);
    let labels = solve_dataset(&data).unwrap();
    let cfg = TrainConfig {
        outer_iterations: 0,
        warmup_iterations: 100,
        hidden_width: PRESET_WIDTH,
        seed: 2,
        ..TrainConfig::default()
    };
    let mse = |m: &Mlp| {
        let idx = data.split.test.clone();
        idx.clone()
            .map(|i| {
                let out = m.predict(&data.samples[i]).unwrap();
                out.iter().zip(&labels.y_star[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / out.len() as f64
            })
            .sum::<f64>()
            / idx.len() as f64
    };
    let init = Mlp::with_two_hidden(30, PRESET_WIDTH, 50, cfg.dropout_rate, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let (model, log) = train_supervised(&data, &labels.y_star, &cfg).unwrap();
    assert!(mse(&model) * 10.0 <= mse(&init), "{} vs {}", mse(&model), mse(&init));
    let tsv = learning_curve_tsv(&log);
    assert!(tsv.starts_with("epoch\tobj_mean\teq_max\tineq_max\n"));
    assert_eq!(tsv.lines().count(), 101);
}
