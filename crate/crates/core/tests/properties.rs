use nalgebra::DMatrix;
use proptest::prelude::*;
use sysid::document::{model_from_json, model_to_json, Model};
use sysid::interp::Pchip;
use sysid::nlarx::{prox, MappingSpec, NlarxModel, SparsityMeasure};
use sysid::regressors::RegressorSpec;
use sysid::signal_data::{fit_percent, read_csv_from, CsvSchema, SignalTable};

fn knots() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((0.01f64..2.0, -3.0f64..3.0), 2..12).prop_map(|steps| {
        let mut t = vec![0.0];
        let mut v = vec![0.0];
        for (dt, dv) in steps {
            t.push(t.last().unwrap() + dt);
            v.push(dv);
        }
        (t, v)
    })
}

proptest! {
    #[test]
    fn pchip_hits_knots_and_stays_in_bracket((t, v) in knots(), frac in 0.0f64..1.0) {
        let p = Pchip::new(&t, &v).unwrap();
        for (ti, vi) in t.iter().zip(&v) {
            prop_assert!((p.eval(*ti).unwrap() - vi).abs() <= 1e-14);
        }
        for k in 0..t.len() - 1 {
            let y = p.eval(t[k] + frac * (t[k + 1] - t[k])).unwrap();
            let (lo, hi) = (v[k].min(v[k + 1]), v[k].max(v[k + 1]));
            // pchip can overshoot only at local extrema of the data
            let interior_extremum = k > 0 && (v[k] - v[k - 1]) * (v[k + 1] - v[k]) < 0.0
                || k + 2 < t.len() && (v[k + 1] - v[k]) * (v[k + 2] - v[k + 1]) < 0.0;
            if !interior_extremum {
                prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12, "{y} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn hard_threshold_is_idempotent(g in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 1..4), 1..6), lambda in 0.0f64..2.0) {
        let once = prox(&g, SparsityMeasure::L0, lambda, 1.0, None);
        prop_assert_eq!(prox(&once, SparsityMeasure::L0, lambda, 1.0, None), once);
    }

    #[test]
    fn soft_threshold_never_grows(g in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 1..4), 1..6), lambda in 0.0f64..2.0) {
        let out = prox(&g, SparsityMeasure::L1, lambda, 1.0, None);
        for (a, b) in g.iter().zip(&out) {
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(nb <= na + 1e-15);
        }
    }

    #[test]
    fn perfect_model_fits_100(y in prop::collection::vec(-10.0f64..10.0, 3..40)) {
        prop_assume!(y.iter().any(|v| (v - y[0]).abs() > 1e-6));
        let m = DMatrix::from_column_slice(y.len(), 1, &y);
        prop_assert_eq!(fit_percent(&m, &m).unwrap()[0], 100.0);
    }

    #[test]
    fn csv_round_trip_is_exact(u in prop::collection::vec(-1e6f64..1e6, 2..30), seed in 0u64..1000) {
        let y: Vec<f64> = u.iter().map(|v| v * 0.1 + seed as f64 * 1e-7).collect();
        let t = SignalTable::from_matrices(
            DMatrix::from_column_slice(u.len(), 1, &u),
            DMatrix::from_column_slice(y.len(), 1, &y),
            0.1,
            0.0,
        ).unwrap();
        let mut buf = Vec::new();
        t.write_csv_to(&mut buf).unwrap();
        let schema = CsvSchema {
            input_names: vec!["u1".into()],
            output_names: vec!["y1".into()],
            time_column: Some("t".into()),
            sample_time: None,
        };
        let back = read_csv_from(buf.as_slice(), &schema).unwrap();
        prop_assert_eq!(back.inputs(), t.inputs());
        prop_assert_eq!(back.outputs(), t.outputs());
        prop_assert_eq!(back.sample_time(), 0.1);
    }

    #[test]
    fn model_documents_round_trip(seed in 0u64..10_000, units in 1usize..6) {
        let m = NlarxModel::new(
            "y1",
            &["u1".to_string()],
            0.5,
            vec![RegressorSpec::linear(&["y1", "u1"], &[&[1, 2], &[1]])],
            &MappingSpec::SigmoidNetwork { units },
            seed,
        ).unwrap();
        let doc = Model::Nlarx(m);
        let text = model_to_json(&doc).unwrap();
        let back = model_from_json(&text).unwrap();
        prop_assert_eq!(model_to_json(&back).unwrap(), text);
        prop_assert_eq!(back.params(), doc.params());
    }
}
