use fedmix::data::{
    gen_synthetic, make_bundles, make_global_test, partition, ClassPool, ClientDataBundle, HeldOut,
    PartitionScheme, PartitionSpec, SplitFractions, SyntheticSpec,
};
use fedmix::evaluation::accuracy;
use fedmix::federation::{init_federation, run_fedavg, FedSchedule};
use fedmix::nn::{forward, MlpSpec, ParamSet, Tensor};
use fedmix::personalization::{
    fine_tune, init_gate, mixture_backward, mixture_forward, mixture_forward_constant, train_mixture,
    MixtureModel, PersonalizationSchedule,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mixture_loss(mix: &MixtureModel, x: &Tensor, y: &[usize]) -> f64 {
    let (p, _) = mixture_forward(mix, x).unwrap();
    let k = p.cols();
    -y.iter().enumerate().map(|(i, &c)| p.values()[i * k + c].ln()).sum::<f64>() / y.len() as f64
}

// zero-initialized biases can leave units exactly on the ReLU kink
fn jittered(p: ParamSet, rng: &mut ChaCha8Rng) -> ParamSet {
    let v: Vec<f64> = p.flatten().iter().map(|w| w + rng.random_range(-0.3..0.3)).collect();
    ParamSet::unflatten(&v, &p).unwrap()
}

fn random_mixture(rng: &mut ChaCha8Rng) -> (MixtureModel, Tensor, Vec<usize>) {
    let input = rng.random_range(1..=6);
    let classes = rng.random_range(2..=6);
    let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..=8)).collect();
    let spec = MlpSpec::classifier(input, &hidden, classes);
    let w_g = jittered(spec.init_params(rng), rng);
    let w_s = jittered(spec.init_params(rng), rng);
    let w_h = jittered(MlpSpec::gate_for(&spec).init_params(rng), rng);
    let n = rng.random_range(1..=4);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..input).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (MixtureModel::new(&spec, w_g, w_s, w_h).unwrap(), Tensor::from_rows(&rows).unwrap(), y)
}

fn check_fd(mix: &MixtureModel, x: &Tensor, y: &[usize], which: &str, analytic: &ParamSet) {
    let h = 1e-6;
    let template = if which == "s" { &mix.w_s } else { &mix.w_h };
    let base = template.flatten();
    let grad = analytic.flatten();
    for i in 0..base.len() {
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            let p = ParamSet::unflatten(&v, template).unwrap();
            let mut m = mix.clone();
            if which == "s" {
                m.w_s = p;
            } else {
                m.w_h = p;
            }
            mixture_loss(&m, x, y)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
        assert!(err < 1e-4, "w_{which}[{i}]: fd {fd} analytic {}", grad[i]);
    }
}

#[test]
fn mixture_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (mix, x, y) = random_mixture(&mut rng);
        let (loss, g_s, g_h, _) = mixture_backward(&mix, &x, &y).unwrap();
        assert!((loss - mixture_loss(&mix, &x, &y)).abs() < 1e-12);
        check_fd(&mix, &x, &y, "s", &g_s);
        check_fd(&mix, &x, &y, "h", &g_h);
    }
}

proptest! {
    #[test]
    fn mixture_rows_stay_on_simplex(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mix, x, _) = random_mixture(&mut rng);
        let (p, h) = mixture_forward(&mix, &x).unwrap();
        for i in 0..p.rows() {
            prop_assert!(p.row(i).iter().all(|&v| v >= 0.0));
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(h[i] > 0.0 && h[i] < 1.0);
        }
    }
}

struct Setup {
    spec: MlpSpec,
    w_g: ParamSet,
    bundles: Vec<ClientDataBundle>,
    global_test: HeldOut,
}

fn trained_setup(p: f64, seed: u64) -> Setup {
    let syn = SyntheticSpec { num_classes: 10, dim: 20, n_total: 20_000, class_separation: 2.0 };
    let d = gen_synthetic(&syn, seed).unwrap();
    let global_test = make_global_test(&d, 1000, seed).unwrap();
    let pool = ClassPool::new(&d, &global_test.indices);
    let parts = partition(
        &pool,
        &PartitionSpec { scheme: PartitionScheme::MajorityFraction { p }, num_clients: 20, samples_per_client: 100, seed },
    )
    .unwrap();
    let bundles = make_bundles(&d, &pool, &parts, SplitFractions::default(), 200, seed).unwrap();
    let spec = MlpSpec::classifier(20, &[32, 32], 10);
    let schedule = FedSchedule { rounds: 40, client_fraction: 0.25, validation_interval: 5, ..FedSchedule::default() };
    let mut fed = init_federation(&spec, bundles.clone(), schedule, 0.0, seed).unwrap();
    let w_g = run_fedavg(&mut fed).unwrap().best_w_g;
    Setup { spec, w_g, bundles, global_test }
}

fn personalize(s: &Setup, client: usize) -> MixtureModel {
    let sched = PersonalizationSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(client as u64);
    let ft = fine_tune(&s.spec, &s.w_g, &s.bundles[client], &sched, &mut rng).unwrap();
    let gate = init_gate(&s.spec, &mut rng);
    let mix = MixtureModel::new(&s.spec, s.w_g.clone(), ft.params, gate).unwrap();
    let before = mix.w_g.to_bytes();
    let out = train_mixture(&mix, &s.bundles[client], &sched, &mut rng).unwrap();
    assert_eq!(mix.w_g.to_bytes(), before);
    assert!(out.log.iter().all(|e| e.mean_gate_value.is_some() && e.stage == "mixture"));
    MixtureModel { w_s: out.w_s, w_h: out.w_h, ..mix }
}

#[test]
fn pathological_client_gains_from_personalization() {
    let s = trained_setup(1.0, 21);
    let sched = PersonalizationSchedule::default();
    let b = &s.bundles[3];
    let ft = fine_tune(&s.spec, &s.w_g, b, &sched, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let global_local = accuracy(|x| forward(&s.spec, &s.w_g, x), &b.local_test).unwrap();
    let tuned_local = accuracy(|x| forward(&s.spec, &ft.params, x), &b.local_test).unwrap();
    assert!(tuned_local > global_local, "fine-tuned {tuned_local} vs global {global_local}");
    assert_eq!(ft.log[0].epoch, 0);
    assert!(ft.log.iter().all(|e| e.stage == "finetune"));
}

#[test]
fn gate_prefers_specialist_on_its_own_classes() {
    let s = trained_setup(1.0, 22);
    let client = 5;
    let mix = personalize(&s, client);
    let b = &s.bundles[client];
    let (_, h_local) = mixture_forward(&mix, b.local_test.features()).unwrap();
    let (_, h_global) = mixture_forward(&mix, s.global_test.data.features()).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&h_local) > mean(&h_global), "local {} global {}", mean(&h_local), mean(&h_global));
}

#[test]
fn constant_gate_recovers_each_expert() {
    let s = trained_setup(0.7, 23);
    let mix = personalize(&s, 1);
    let test = &s.global_test.data;
    let specialist = accuracy(|x| forward(&s.spec, &mix.w_s, x), test).unwrap();
    let global = accuracy(|x| forward(&s.spec, &mix.w_g, x), test).unwrap();
    assert_eq!(accuracy(|x| mixture_forward_constant(&mix, x, 1.0), test).unwrap(), specialist);
    assert_eq!(accuracy(|x| mixture_forward_constant(&mix, x, 0.0), test).unwrap(), global);
    let ys = mixture_forward_constant(&mix, test.features(), 1.0).unwrap();
    assert_eq!(ys, forward(&s.spec, &mix.w_s, test.features()).unwrap());
}

#[test]
fn zero_epoch_mixture_returns_inputs() {
    let s = trained_setup(0.5, 24);
    let sched = PersonalizationSchedule { max_epochs: 0, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gate = init_gate(&s.spec, &mut rng);
    let mix = MixtureModel::new(&s.spec, s.w_g.clone(), s.w_g.clone(), gate.clone()).unwrap();
    let out = train_mixture(&mix, &s.bundles[0], &sched, &mut rng).unwrap();
    assert_eq!(out.w_s.to_bytes(), s.w_g.to_bytes());
    assert_eq!(out.w_h.to_bytes(), gate.to_bytes());
    assert_eq!(out.log.len(), 1);
}
