use faircl_web::*;
use proptest::prelude::*;

fn trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

fn pair_count_auc(s: &[f64], t: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| t[i]) {
        for j in (0..s.len()).filter(|&j| !t[j]) {
            pairs += 1.0;
            wins += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

proptest! {
    #[test]
    fn roc_area_matches_pair_counting(v in prop::collection::vec((0u8..8, any::<bool>()), 2..60)) {
        let mut v = v;
        v[0].1 = true;
        v[1].1 = false;
        let s: Vec<f64> = v.iter().map(|&(x, _)| x as f64 / 7.0).collect();
        let t: Vec<bool> = v.iter().map(|&(_, y)| y).collect();
        let curve = roc_curve(&s, &t);
        prop_assert_eq!((curve[0].fpr, curve[0].tpr), (0.0, 0.0));
        let last = curve.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        prop_assert!(curve.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        prop_assert!((trapezoid(&curve) - pair_count_auc(&s, &t)).abs() < 1e-12);
    }
}

#[test]
fn exploration_is_consistent() {
    let e = explore(0.3, 0.5, 1).unwrap();
    let [all, male, female] = &e.curves[..] else {
        panic!("expected three curves")
    };
    assert_eq!(all.positives, male.positives + female.positives);
    assert_eq!(all.negatives, male.negatives + female.negatives);
    assert_eq!(e.gender_eo, Some(male.tpr.unwrap() - female.tpr.unwrap()));
    for c in &e.curves {
        assert!((trapezoid(&c.points) - c.auc.unwrap()).abs() < 1e-12);
    }
    // weaker female signal helps men
    assert!(male.auc.unwrap() > female.auc.unwrap());
    assert!(e.gender_eo.unwrap() > 0.0);
    assert!((0.0..=1.0).contains(&e.calibrated_threshold));

    // threshold only moves the operating point, not the model
    let low = explore(0.3, 0.1, 1).unwrap();
    assert_eq!(low.curves[0].points, all.points);
    assert!(low.curves[0].tpr >= all.tpr);
}

#[test]
fn comparison_has_one_point_per_task() {
    let c = compare("fine_tune, lwf", 1.0, 0).unwrap();
    assert_eq!(c.tasks, 3);
    let names: Vec<&str> = c.series.iter().map(|s| s.strategy.as_str()).collect();
    assert_eq!(names, ["fine_tune", "lwf"]);
    for s in &c.series {
        assert_eq!(s.auc.len(), 3);
        assert_eq!(s.gender_eo.len(), 3);
    }
    // fine-tuning forgets more than LwF by the last task
    assert!(c.series[1].auc[2].unwrap() > c.series[0].auc[2].unwrap());
    assert_eq!(compare("fine_tune, lwf", 1.0, 0).unwrap(), c);
}

#[test]
fn exports_return_json_or_messages() {
    let json: serde_json::Value =
        serde_json::from_str(&compare_strategies("joint", 1.0, 2).unwrap()).unwrap();
    assert_eq!(json["series"][0]["auc"].as_array().unwrap().len(), 3);
    let json: serde_json::Value =
        serde_json::from_str(&explore_threshold(1.0, 0.5, 2).unwrap()).unwrap();
    assert!(json["curves"][0]["points"][0]["threshold"].is_null());

    assert!(compare_strategies("", 1.0, 0)
        .unwrap_err()
        .contains("no strategies"));
    assert!(compare_strategies("sgd", 1.0, 0)
        .unwrap_err()
        .contains("sgd"));
    assert!(explore_threshold(1.0, 1.5, 0).unwrap_err().contains("1.5"));
}
