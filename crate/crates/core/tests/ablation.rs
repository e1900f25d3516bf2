use ntua::evaluation::{initial_cache, run_ablation, run_variant, PipelineConfig, Variant};
use ntua::{generate, train_keys, Bundle, LabelSource, Omega, SynthSpec, TrainConfig};

fn bundle(seed: u64, eta_teacher: f64) -> Bundle {
    generate(&SynthSpec {
        classes: 6,
        shots: 8,
        dim: 24,
        test_per_class: 30,
        eta_teacher,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn cfg(seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig {
        shots: 8,
        ..PipelineConfig::default()
    };
    c.train.epochs = 5;
    c.train.seed = seed;
    c
}

#[test]
fn variants_start_from_the_same_keys() {
    let b = bundle(1, 0.1);
    let keys: Vec<_> = Variant::ALL
        .iter()
        .map(|&v| run_variant(&b, v, &cfg(1)).unwrap().initial_cache.keys().clone())
        .collect();
    for k in &keys[1..] {
        assert!(k.iter().zip(keys[0].iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn teacher_equal_to_student_makes_refinement_a_no_op() {
    let mut b = bundle(2, 0.1);
    let mut teacher = b.student_pl.clone().unwrap();
    teacher.source = LabelSource::Teacher;
    b.teacher_pl = Some(teacher);
    let kc = run_variant(&b, Variant::Kc, &cfg(2)).unwrap();
    let kcr = run_variant(&b, Variant::Kcr, &cfg(2)).unwrap();
    assert_eq!(kc.cache.keys(), kcr.cache.keys());
    assert_eq!(kc.eval, kcr.eval);
}

#[test]
fn unit_omega_changes_nothing() {
    let b = bundle(3, 0.1);
    let c = cfg(3);
    let cache = initial_cache(&b, &c).unwrap();
    let with = TrainConfig {
        include_omega: true,
        ..c.train.clone()
    };
    let without = TrainConfig {
        include_omega: false,
        ..c.train.clone()
    };
    let ones = Omega::ones(cache.rows());
    let (a, ra) = train_keys(&cache, &b.train, Some(&ones), &b.classifier, &with).unwrap();
    let (d, rd) = train_keys(&cache, &b.train, None, &b.classifier, &without).unwrap();
    assert!(a
        .keys()
        .iter()
        .zip(d.keys().iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(ra.final_loss.to_bits(), rd.final_loss.to_bits());
}

#[test]
fn perfect_teacher_helps_on_most_seeds() {
    let wins = (0..20)
        .filter(|&seed| {
            let r = run_ablation(&bundle(seed, 0.0), &cfg(seed)).unwrap();
            r.kcr.correct >= r.kc.correct
        })
        .count();
    assert!(wins >= 16, "KCR >= KC on {wins}/20 seeds");
}

#[test]
fn ablation_echoes_its_inputs() {
    let b = bundle(4, 0.1);
    let r = run_ablation(&b, &cfg(7)).unwrap();
    assert_eq!(r.seed, 7);
    assert_eq!(r.shots, 8);
    assert_eq!(r.test_rows, b.test.rows());
    for v in Variant::ALL {
        assert_eq!(r.score(v).total, b.test.rows());
    }
}
