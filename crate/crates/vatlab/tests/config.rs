use proptest::prelude::*;
use vatlab::config::{parse_schedule, parse_text, RunConfig, Task};
use vatlab::VatlabError;
use vatlab_core::objective::Method;
use vatlab_core::optim::LrSchedule;

fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
    v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

#[test]
fn file_syntax() {
    let p = parse_text("# header\n\nperturb.eps = 2.0  # radius\nmethod=rpt\n").unwrap();
    assert_eq!(p, pairs(&[("perturb.eps", "2.0"), ("method", "rpt")]));
    assert!(matches!(parse_text("perturb.eps 2"), Err(VatlabError::Config(_))));
    let e = parse_text("perturb.epsilon = 2").unwrap_err();
    assert!(e.to_string().contains("unknown config key `perturb.epsilon`"));
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn flags_win_over_file_and_task_picks_defaults() {
    let file = pairs(&[("task", "mnist"), ("perturb.eps", "3.0"), ("seed", "4")]);
    let flags = pairs(&[("perturb.eps", "1.5")]);
    let c = RunConfig::resolve(&[file, flags]).unwrap();
    assert_eq!(c.task, Task::Mnist);
    assert_eq!(c.eps, 1.5);
    assert_eq!(c.seed, 4);
    assert_eq!(c.hidden, vec![256, 128]);
    let s = RunConfig::resolve(&[]).unwrap();
    assert_eq!((s.task, s.hidden.clone()), (Task::Synth2d, vec![50]));
}

#[test]
fn method_constraints() {
    let rpt = RunConfig::resolve(&[pairs(&[("method", "rpt"), ("perturb.k", "3")])]).unwrap();
    assert_eq!(rpt.objective().perturb.power_iterations, 0);
    assert_eq!(rpt.objective().expected_backprops(), 2);
    let bad = RunConfig::resolve(&[pairs(&[("method", "vat"), ("perturb.norm", "linf")])]);
    assert!(matches!(bad, Err(VatlabError::Config(_))));
    assert!(RunConfig::resolve(&[pairs(&[("objective.alpha", "-1")])]).is_err());
    assert!(RunConfig::resolve(&[pairs(&[("perturb.xi", "0")])]).is_err());
    assert!(RunConfig::resolve(&[pairs(&[("method", "vat-entmin")])]).unwrap().method == Method::VatEntMin);
}

#[test]
fn schedules() {
    assert_eq!(parse_schedule("constant").unwrap(), LrSchedule::Constant);
    assert_eq!(parse_schedule("exp_decay:0.9:600").unwrap(), LrSchedule::ExpDecay { rate: 0.9, every: 600 });
    assert_eq!(parse_schedule("linear_decay:10").unwrap(), LrSchedule::LinearDecay { start_update: 10 });
    assert!(parse_schedule("cosine").is_err());
}

proptest! {
    #[test]
    fn resolved_text_reads_back_identically(
        eps in 0.0f64..10.0,
        lr in 1e-5f64..1.0,
        seed in any::<u64>(),
        hidden in proptest::collection::vec(1usize..300, 0..4),
        method in 0usize..6,
        mnist in any::<bool>(),
    ) {
        let mut c = RunConfig::defaults(if mnist { Task::Mnist } else { Task::Synth2d });
        c.method = Method::ALL[method];
        c.eps = eps;
        c.lr = lr;
        c.seed = seed;
        c.hidden = hidden;
        let back = RunConfig::resolve(&[parse_text(&c.to_text()).unwrap()]).unwrap();
        prop_assert_eq!(back.objective(), c.objective());
        prop_assert_eq!(back.train_config(), c.train_config());
        prop_assert_eq!(back.to_text(), c.to_text());
    }
}
