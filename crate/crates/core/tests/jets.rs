use jetsde::model::{map_jets, SdeModel};
use jetsde::{pushforward, Expr, JetField, JetPoint, SymbolTable};
use proptest::prelude::*;

/// Random expressions in `x1, x2` that are smooth everywhere.
fn expr() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        Just("x1".to_string()),
        Just("x2".to_string()),
        (-2.0f64..2.0).prop_map(|c| format!("({c:?})")),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} + {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} - {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} * {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} / (1 + ({b})^2))")),
            inner.clone().prop_map(|a| format!("sin({a})")),
            inner.clone().prop_map(|a| format!("cos({a})")),
            inner.clone().prop_map(|a| format!("atan({a})")),
            inner.clone().prop_map(|a| format!("tanh({a})")),
            inner.clone().prop_map(|a| format!("exp(0.3*tanh({a}))")),
            inner.clone().prop_map(|a| format!("sqrt(1 + ({a})^2)")),
            inner.clone().prop_map(|a| format!("log(2 + sin({a}))")),
            inner.prop_map(|a| format!("(-{a})")),
        ]
    })
}

fn table() -> SymbolTable {
    SymbolTable::standard(2, 1)
}

fn eval(e: &Expr, x: [f64; 2]) -> f64 {
    e.eval_real(&table().bind(&x, 0.0, &[0.0])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn jet_derivatives_match_finite_differences(src in expr(), x1 in -1.0f64..1.0, x2 in -1.0f64..1.0) {
        let s = table();
        let e = Expr::parse(&src, &s).unwrap();
        let jet = &map_jets(std::slice::from_ref(&e), &s, &[x1, x2], 0.0).unwrap()[0];
        let x = [x1, x2];
        let f = |dx: [f64; 2]| eval(&e, [x[0] + dx[0], x[1] + dx[1]]);
        prop_assert!((jet.value() - f([0.0, 0.0])).abs() <= 1e-12 * (1.0 + jet.value().abs()));
        let h = 1e-3;
        let unit = |i: usize, c: f64| if i == 0 { [c, 0.0] } else { [0.0, c] };
        for i in 0..2 {
            let fd = (f(unit(i, h)) - f(unit(i, -h))) / (2.0 * h);
            prop_assert!((jet.grad()[i] - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "grad {i}: {} vs {fd}", jet.grad()[i]);
            for j in 0..2 {
                let at = |si: f64, sj: f64| {
                    let (a, b) = (unit(i, si * h), unit(j, sj * h));
                    f([a[0] + b[0], a[1] + b[1]])
                };
                let fd = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h);
                prop_assert!((jet.hess(i, j) - fd).abs() <= 1e-4 * (1.0 + fd.abs()), "hess {i}{j}: {} vs {fd}", jet.hess(i, j));
            }
        }
    }

    #[test]
    fn printing_is_a_fixed_point_of_parsing(src in expr(), x1 in -1.0f64..1.0, x2 in -1.0f64..1.0) {
        let s = table();
        let e = Expr::parse(&src, &s).unwrap();
        let printed = e.to_string();
        let again = Expr::parse(&printed, &s).unwrap();
        prop_assert_eq!(again.to_string(), printed);
        prop_assert_eq!(eval(&again, [x1, x2]), eval(&e, [x1, x2]));
    }

    #[test]
    fn pushforward_obeys_the_chain_rule(
        f1 in expr(), f2 in expr(), g1 in expr(), g2 in expr(),
        x1 in 0.2f64..1.5, x2 in -1.0f64..1.0,
    ) {
        let s = table();
        let field = SdeModel::jet_field(
            "gamma-e",
            s.clone(),
            vec![1.0, 0.0],
            &["x1 - x2*u1 + 3*x1*u1^2", "x2 + x1*u1 + 3*x2*u1^2"],
        )
        .unwrap()
        .to_jet_field()
        .unwrap();
        let parse = |v: &[&String]| v.iter().map(|t| Expr::parse(t, &s).unwrap()).collect::<Vec<_>>();
        let (f, g) = (parse(&[&f1, &f2]), parse(&[&g1, &g2]));
        let compose = |gi: &String| gi.replace("x1", "(F1)").replace("x2", "(F2)").replace("F1", &f1).replace("F2", &f2);
        let gf = parse(&[&compose(&g1), &compose(&g2)]);

        let x = [x1, x2];
        let jet = field.jet(&x, 0.0).unwrap();
        let first = pushforward(&jet, &map_jets(&f, &s, &x, 0.0).unwrap()).unwrap();
        let y = first.value();
        let twice = pushforward(&first, &map_jets(&g, &s, &y, 0.0).unwrap()).unwrap();
        let once: JetPoint = pushforward(&jet, &map_jets(&gf, &s, &x, 0.0).unwrap()).unwrap();
        for (p, q) in twice.coords().iter().zip(once.coords()) {
            let scale = 1.0 + q.value().abs() + q.grad().iter().map(|v| v.abs()).sum::<f64>() + q.hess(0, 0).abs();
            prop_assert!((p.value() - q.value()).abs() <= 1e-9 * scale);
            prop_assert!((p.grad()[0] - q.grad()[0]).abs() <= 1e-9 * scale);
            prop_assert!((p.hess(0, 0) - q.hess(0, 0)).abs() <= 1e-9 * scale);
        }
    }
}
