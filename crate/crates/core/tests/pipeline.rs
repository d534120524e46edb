use iuq::harness::config::Method;
use iuq::harness::report::{build_report, load_report, render};
use iuq::harness::run::Scenario;
use iuq::model::{Model, RefloodModel};

const AFFINE: &str = r#"
name = "pipeline"
seed = 42
[model]
kind = "affine"
sensitivity = [[1.0, 0.5], [0.4, 1.5]]
design_coef = [[0.8], [0.3]]
offset = [1.0, -0.5]
[truth]
mean = [0.0, 0.0]
var = [0.04, 0.09]
[data]
noise_sd = [0.02]
n_designs = 60
design_range = [[0.0, 2.0]]
[fuq]
n_samples = 2000
[mba]
prior = [{ kind = "normal", mean = 0.0, sd = 1.0 }, { kind = "normal", mean = 0.0, sd = 1.0 }]
"#;

/// Fixed-step RK4 written independently of the library, at a much finer step.
fn fine_trace(m: &RefloodModel, t0: f64, q: f64, ph: f64, pq: f64, substeps: usize) -> Vec<(f64, f64)> {
    let f = |t: f64, y: f64| {
        let s = 1.0 / (1.0 + (-(pq * m.front_speed * t - m.elevation) / m.front_width).exp());
        let h = ph * (m.h_dry + (m.h_wet - m.h_dry) * s);
        (q - h * (y - m.t_sat)) / m.heat_capacity
    };
    let dt = m.dt / substeps as f64;
    let total = (m.t_end / dt).round() as usize;
    let every = m.output_every * substeps;
    let mut y = t0;
    let mut out = vec![(0.0, t0)];
    for k in 0..total {
        let t = k as f64 * dt;
        let k1 = f(t, y);
        let k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1);
        let k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2);
        let k4 = f(t + dt, y + dt * k3);
        y += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (k + 1) % every == 0 {
            out.push(((k + 1) as f64 * dt, y));
        }
    }
    out
}

#[test]
fn reflood_trace_matches_fine_step_oracle() {
    let m = RefloodModel::default();
    for (x, th) in [([900.0, 2.0e4], [1.0, 1.0]), ([1050.0, 1.0e4], [1.4, 0.8]), ([800.0, 3.0e4], [0.7, 1.3])] {
        let y = m.eval(&x, &th);
        let oracle = fine_trace(&m, x[0], x[1], th[0], th[1], 20);
        let times = y.times.as_ref().unwrap();
        assert_eq!(times.len(), oracle.len());
        for ((t, v), (to, vo)) in times.iter().zip(&y.values).zip(&oracle) {
            assert!((t - to).abs() < 1e-9);
            assert!((v - vo).abs() < 1e-6 * vo.abs(), "t = {t}: {v} vs {vo}");
        }
    }
}

#[test]
fn reflood_dry_phase_matches_closed_form() {
    // Before the front arrives the wetted fraction is below 1e-10, so the
    // heat transfer is constant and the cooling law is a single exponential.
    let m = RefloodModel::default();
    let (t0, q) = (950.0, 2.0e4);
    let y = m.eval(&[t0, q], &[1.0, 1.0]);
    let h = m.h_dry;
    let t_inf = m.t_sat + q / h;
    for (t, v) in y.times.as_ref().unwrap().iter().zip(&y.values).filter(|(t, _)| **t <= 50.0) {
        let exact = t_inf + (t0 - t_inf) * (-h * t / m.heat_capacity).exp();
        assert!((v - exact).abs() < 1e-6 * exact, "t = {t}: {v} vs {exact}");
    }
}

fn with_methods(methods: &str) -> Scenario {
    Scenario::from_toml(&format!("methods = {methods}\n{AFFINE}"), None).unwrap()
}

#[test]
fn calibrated_affine_circe_envelops_data() {
    let sc = with_methods(r#"["circe-bias"]"#);
    let run = sc.run(&sc.config.methods).unwrap();
    let env = &run.methods[0].propagation.envelope;
    assert!(env.fraction >= 0.9, "coverage {}", env.fraction);
    let base = run.baseline.as_ref().unwrap();
    assert!(base.envelope.fraction >= 0.95 - 3.0 * (0.95f64 * 0.05 / 120.0).sqrt(), "baseline {}", base.envelope.fraction);
}

#[test]
fn empty_method_list_reports_generation_only() {
    let sc = with_methods("[]");
    let run = sc.run(&[]).unwrap();
    let r = build_report(&sc, &run).unwrap();
    assert_eq!(r["schema_version"], "1");
    assert_eq!(r["generation"]["n_experiments"], 60);
    assert!(r["methods"].as_object().unwrap().is_empty());
}

#[test]
fn two_methods_share_the_scenario_stamp() {
    let sc = with_methods(r#"["circe", "mba"]"#);
    let run = sc.run(&[Method::Circe, Method::Mba]).unwrap();
    let r = build_report(&sc, &run).unwrap();
    let methods = r["methods"].as_object().unwrap();
    assert!(methods.contains_key("circe") && methods.contains_key("mba"));
    assert_eq!(r["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(r["seed"], 42);
    // Chain draws are summarised, not dumped.
    assert!(methods["mba"]["result"]["chain"].get("samples").is_none());
    assert!(methods["mba"]["result"]["chain"]["n_draws"].as_u64().unwrap() > 0);
}

#[test]
fn report_round_trips_byte_for_byte() {
    let text = format!(
        "methods = [\"circe\", \"mle-map\", \"mcda\", \"sample-adjust\"]\n{AFFINE}{}",
        "[mcda]\nprior_var = [0.25, 0.25]\n[sample_adjust]\nranges = [[-0.1, 0.1], [-0.1, 0.1]]\nmax_rounds = 12\n"
    );
    let sc = Scenario::from_toml(&text, None).unwrap();
    let run = sc.run(&sc.config.methods).unwrap();
    let first = render(&build_report(&sc, &run).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("report.json");
    std::fs::write(&p, &first).unwrap();
    let again = render(&load_report(&p).unwrap()).unwrap();
    assert_eq!(first, again);
}
