use manipdiff::diffusion::{
    guidance_gradient, sample_window, squared_cosine_schedule, window_cost, Guidance,
    GuidanceConfig, NoisePredictor, NoiseSchedule, Normalizer, SampleOptions, WindowCost,
};
use manipdiff::sim::{scripted_expert, PostureCost};
use manipdiff::{DiffusionError, Scenario};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WINDOW: usize = 4;

fn scenario() -> Scenario {
    let path = format!(
        "{}/../../scenarios/plate_wipe.json",
        env!("CARGO_MANIFEST_DIR")
    );
    Scenario::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn normalizer(s: &Scenario) -> Normalizer {
    let mut center = s.nominal_posture.clone();
    let mut scale = vec![1.5; s.dof()];
    center.resize(s.action_dim(), 0.5);
    scale.resize(s.action_dim(), 0.5);
    Normalizer::new(center, scale).unwrap()
}

/// Normalized windows around expert actions, perturbed per joint.
fn windows(s: &Scenario, norm: &Normalizer, count: usize) -> Vec<(usize, Vec<f64>)> {
    let demo = scripted_expert(s, &s.posture_profile(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..count)
        .map(|i| {
            let start = (i * 5) % (s.episode_length - WINDOW);
            let mut raw = Vec::new();
            for k in 0..WINDOW {
                let mut a = demo.steps[start + k].action.clone();
                for v in &mut a[..s.dof()] {
                    *v += rng.random_range(-0.2..0.2);
                }
                raw.extend(norm.normalize(&a));
            }
            (start, raw)
        })
        .collect()
}

fn project_raw(s: &Scenario, norm: &Normalizer, window: &[f64], grad: &[f64]) -> Vec<DVector<f64>> {
    let dim = norm.dim();
    let raw = norm.denormalize(window);
    raw.chunks(dim)
        .zip(grad.chunks(dim))
        .map(|(a, g)| {
            let j = s.task_jacobian(&a[..s.dof()]).unwrap();
            let shift =
                DVector::from_iterator(s.dof(), (0..s.dof()).map(|d| g[d] * norm.scale()[d]));
            j * shift
        })
        .collect()
}

#[test]
fn unprojected_gradient_matches_dense_differences() {
    let s = scenario();
    let norm = normalizer(&s);
    let h = 1e-5;
    for (start, w) in windows(&s, &norm, 10) {
        let cost = PostureCost::new(&s, &s.posture_profile(), start, WINDOW)
            .unwrap()
            .unprojected();
        let g = guidance_gradient(&w, &cost, &norm, 1e-4).unwrap();
        for i in 0..w.len() {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[i] += h;
            down[i] -= h;
            let fd = -(window_cost(&up, &cost, &norm).unwrap()
                - window_cost(&down, &cost, &norm).unwrap())
                / (2.0 * h);
            let err = (g[i] - fd).abs();
            assert!(
                err <= 1e-4 * fd.abs().max(1.0),
                "coordinate {i}: {} vs {fd}",
                g[i]
            );
        }
    }
}

#[test]
fn projected_shift_keeps_the_path_and_descends() {
    let s = scenario();
    let norm = normalizer(&s);
    let mut descended = 0;
    let cases = windows(&s, &norm, 50);
    for (start, w) in &cases {
        let cost = PostureCost::new(&s, &s.posture_profile(), *start, WINDOW).unwrap();
        let g = guidance_gradient(w, &cost, &norm, 1e-4).unwrap();
        for task_rate in project_raw(&s, &norm, w, &g) {
            assert!(task_rate.amax() <= 1e-8 * g.iter().map(|v| v.abs()).fold(1.0, f64::max));
        }
        let gg: f64 = g.iter().map(|v| v * v).sum();
        if gg < 1e-16 {
            continue;
        }
        let step = 1e-3 / gg.sqrt();
        let moved: Vec<f64> = w.iter().zip(&g).map(|(x, gi)| x + step * gi).collect();
        let before = window_cost(w, &cost, &norm).unwrap();
        let after = window_cost(&moved, &cost, &norm).unwrap();
        if after < before {
            descended += 1;
        }
    }
    assert_eq!(descended, cases.len());
}

/// Predicts the noise that maps a fixed window to the current sample.
struct Delta(Vec<f64>, NoiseSchedule);

impl NoisePredictor for Delta {
    fn action_len(&self) -> usize {
        self.0.len()
    }
    fn predict(&self, noisy: &[f64], step: usize, _: &[f64]) -> Vec<f64> {
        let ab = self.1.alpha_bar(step);
        noisy
            .iter()
            .zip(&self.0)
            .map(|(x, a)| (x - ab.sqrt() * a) / (1.0 - ab).sqrt())
            .collect()
    }
}

struct Pull(Vec<usize>);

impl WindowCost for Pull {
    fn step_cost(&self, _: usize, a: &[f64]) -> Result<f64, DiffusionError> {
        Ok(self.0.iter().map(|&d| (a[d] - 1.0).powi(2)).sum())
    }
    fn guided_dims(&self) -> &[usize] {
        &self.0
    }
    fn projector(&self, _: usize, _: &[f64]) -> Result<Option<DMatrix<f64>>, DiffusionError> {
        Ok(None)
    }
}

#[test]
fn guided_delta_samples_are_never_worse() {
    let schedule = squared_cosine_schedule(100).unwrap();
    let predictor = Delta(vec![-0.4, 0.2, 0.0, 0.6], schedule.clone());
    let norm = Normalizer::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    let cost = Pull(vec![0, 1]);
    let config = GuidanceConfig {
        lambda: 5.0,
        fd_step: 1e-4,
        guided_steps: Some((1..=30).collect()),
    };
    let guidance = Guidance {
        config: &config,
        cost: &cost,
        norm: &norm,
    };
    let opts = SampleOptions::default();
    for seed in 0..20 {
        let plain = sample_window(&predictor, &schedule, &[], seed, &opts, None).unwrap();
        let guided =
            sample_window(&predictor, &schedule, &[], seed, &opts, Some(&guidance)).unwrap();
        let (a, b) = (
            window_cost(&plain, &cost, &norm).unwrap(),
            window_cost(&guided, &cost, &norm).unwrap(),
        );
        assert!(b <= a, "seed {seed}: guided {b} > unguided {a}");
    }
}

#[test]
fn zero_scale_guidance_is_bit_identical() {
    let schedule = squared_cosine_schedule(100).unwrap();
    let predictor = Delta(vec![0.3, -0.1], schedule.clone());
    let norm = Normalizer::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    let cost = Pull(vec![0, 1]);
    let config = GuidanceConfig::default();
    let guidance = Guidance {
        config: &config,
        cost: &cost,
        norm: &norm,
    };
    for opts in [
        SampleOptions::default(),
        SampleOptions {
            sampler: manipdiff::diffusion::SamplerKind::Accelerated { steps: 10 },
            clip: Some(1.0),
        },
    ] {
        for seed in 0..5 {
            let plain = sample_window(&predictor, &schedule, &[], seed, &opts, None).unwrap();
            let zero =
                sample_window(&predictor, &schedule, &[], seed, &opts, Some(&guidance)).unwrap();
            assert_eq!(plain, zero);
        }
    }
}
