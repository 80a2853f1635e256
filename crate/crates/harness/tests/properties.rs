use erm_harness::config::ExperimentConfig;
use erm_harness::metrics::{to_csv, MetricsRow, CSV_HEADER};
use proptest::prelude::*;

fn float_keys() -> impl Strategy<Value = (&'static str, f64)> {
    prop_oneof![
        (Just("optim.lr"), 1e-6f64..1.0),
        (Just("optim.lr_gauge"), 1e-6f64..1.0),
        (Just("optim.lr_decay"), 0.01f64..=1.0),
        (Just("relay.fraction"), 0.0f64..=1.0),
        (Just("relay.gauge"), 0.0f64..=1.0),
        (Just("sampler.aux_weight"), 0.0f64..10.0),
        (Just("gauge.offset_scale"), 0.0f64..1.0),
        (Just("org.grad_threshold"), 1e-9f64..1.0),
        (Just("scene.density"), 0.1f64..500.0),
    ]
}

fn choice_keys() -> impl Strategy<Value = (&'static str, &'static str)> {
    prop_oneof![
        Just(("org.mode", "soft")),
        Just(("org.mode", "full")),
        Just(("sampler.mode", "evolutive")),
        Just(("field.kind", "planes")),
        Just(("pipeline", "splat")),
    ]
}

proptest! {
    #[test]
    fn config_text_round_trips(
        floats in prop::collection::vec(float_keys(), 0..6),
        choices in prop::collection::vec(choice_keys(), 0..3),
        seed in any::<u64>(),
        iters in 0usize..100_000,
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.iters = iters;
        for (k, v) in floats {
            cfg.set(k, &v.to_string()).unwrap();
        }
        for (k, v) in choices {
            cfg.set(k, v).unwrap();
        }
        let again = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(again.to_text(), cfg.to_text());
    }

    #[test]
    fn metrics_csv_has_fixed_shape(rows in prop::collection::vec((0usize..10_000, 1e-12f64..1.0, 0usize..100_000), 0..20)) {
        let rows: Vec<MetricsRow> = rows
            .into_iter()
            .map(|(iter, loss, count)| MetricsRow {
                experiment: "p".into(),
                iter,
                loss,
                psnr: -10.0 * loss.log10(),
                seconds: 0.0,
                count,
            })
            .collect();
        let csv = to_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        prop_assert_eq!(lines[0], CSV_HEADER);
        prop_assert_eq!(lines.len(), rows.len() + 1);
        for (line, row) in lines[1..].iter().zip(&rows) {
            let cols: Vec<&str> = line.split(',').collect();
            prop_assert_eq!(cols.len(), 5);
            prop_assert_eq!(cols[0].parse::<usize>().unwrap(), row.iter);
            let loss: f64 = cols[1].parse().unwrap();
            prop_assert!((loss - row.loss).abs() <= 1e-9 * row.loss);
            prop_assert_eq!(cols[4].parse::<usize>().unwrap(), row.count);
        }
    }
}
