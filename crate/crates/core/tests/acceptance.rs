//! Exit-gate criteria, one PASS/FAIL line each.

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use batchiso::fixtures::{self, LOGITS, PRESENT_KEY, TOY_VOCAB};
use batchiso::forge::{compute_trigger_constant, inject, AttackKind, Injection, InjectionPlan, SteerMode, TriggerSpec};
use batchiso::interp::{fuzz_soundness, FuzzOptions};
use batchiso::label::MAX_USER;
use batchiso::{check, execute, GraphModel, Label, LabelState, Outcome, TensorMap, TensorValue};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ATTACKER: usize = 0;
const VICTIM: usize = 1;
const POSITIONS: [usize; 2] = [1, 2];

/// Reference label: an explicit user set plus the random flag.
#[derive(Clone, Debug)]
struct SetLabel {
    users: BTreeSet<u32>,
    random: bool,
}

impl SetLabel {
    fn join(&self, o: &SetLabel) -> SetLabel {
        SetLabel {
            users: self.users.union(&o.users).copied().collect(),
            random: self.random || o.random,
        }
    }

    fn state(&self) -> LabelState {
        match (self.users.first(), self.users.last()) {
            (None, _) if self.random => LabelState::RandomOnly,
            (Some(&lo), Some(&hi)) if lo == hi => LabelState::SingleUser(lo),
            (Some(&min), Some(&max)) => LabelState::MultiUser { min, max },
            _ => LabelState::Neutral,
        }
    }

    fn packed(&self) -> Label {
        let base = if self.random { Label::RANDOM } else { Label::NEUTRAL };
        self.users
            .iter()
            .fold(base, |l, &u| l.combine(Label::from_user(u).unwrap()))
    }
}

fn random_set(rng: &mut ChaCha8Rng) -> SetLabel {
    let n = [0, 0, 1, 1, 1, 2, 3][rng.gen_range(0..7)];
    let users = (0..n)
        .map(|_| {
            if rng.gen_bool(0.1) {
                MAX_USER - rng.gen_range(0..3)
            } else {
                rng.gen_range(1..6)
            }
        })
        .collect();
    SetLabel {
        users,
        random: rng.gen_bool(0.2),
    }
}

fn monoid_laws() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let start = Instant::now();
    for _ in 0..n {
        let (sa, sb, sc) = (random_set(&mut rng), random_set(&mut rng), random_set(&mut rng));
        let (a, b, c) = (sa.packed(), sb.packed(), sc.packed());
        assert_eq!(a.combine(b).combine(c), a.combine(b.combine(c)), "associativity");
        assert_eq!(a.combine(b), b.combine(a), "commutativity");
        assert_eq!(a.combine(a), a, "idempotence");
        assert_eq!(a.combine(Label::NEUTRAL), a, "identity");
        assert_eq!(Label::NEUTRAL.combine(a), a, "identity");
        let joined = sa.join(&sb).join(&sc);
        assert_eq!(a.combine(b).combine(c).classify(), joined.state(), "classification");
        if a.is_multi_user() {
            assert!(a.combine(b).is_multi_user(), "multi-user escaped");
        }
    }
    let t = start.elapsed();
    assert!(t < Duration::from_secs(10), "took {t:?}");
    format!("{n} triples in {t:.2?}")
}

fn toy() -> (GraphModel, batchiso::BatchingConfig, f32) {
    let (m, c) = fixtures::toy_attention();
    let on = fixtures::toy_attention_inputs(2, 1, Some((ATTACKER, &POSITIONS)));
    let k = compute_trigger_constant(&m, &on, &TriggerSpec::new(PRESENT_KEY)).unwrap();
    (m, c, k)
}

fn plan(attack: AttackKind, k: f32) -> InjectionPlan {
    InjectionPlan {
        trigger: TriggerSpec::new(PRESENT_KEY).with_const(k),
        attack,
        target_tensor: LOGITS.into(),
        batch_size: 2,
    }
}

fn steer_attack(scale: f32) -> (AttackKind, Vec<f32>) {
    let v: Vec<f32> = (0..TOY_VOCAB).map(|i| 0.25 * i as f32 - 0.5).collect();
    let a = AttackKind::Steer {
        victim_index: VICTIM,
        steering_vector: v.clone(),
        scale,
        mode: SteerMode::Activation,
    };
    (a, v)
}

fn attack_detection() -> String {
    let (m, config, k) = toy();
    let mut slowest = Duration::ZERO;
    let mut timed = |model: &GraphModel| {
        let start = Instant::now();
        let v = check(model, &config).unwrap();
        let again = check(model, &config).unwrap();
        assert!(v.same_result(&again), "nondeterministic verdict");
        slowest = slowest.max(start.elapsed() / 2);
        v
    };
    assert_eq!(timed(&m).verdict, Outcome::Safe);
    let attacks = [
        AttackKind::Get { victim_index: VICTIM },
        AttackKind::Set { victim_index: VICTIM },
        steer_attack(1.0).0,
    ];
    let mut firsts = vec![];
    for a in attacks {
        let inj = inject(&m, &plan(a.clone(), k)).unwrap();
        let v = timed(&inj.model);
        assert_eq!(v.verdict, Outcome::Leak, "{}", a.name());
        let first = v.first_tainted_node.unwrap();
        assert!(inj.added_nodes.contains(&first), "{}: {first} not injected", a.name());
        firsts.push(format!("{}@{first}", a.name()));
    }
    assert!(slowest < Duration::from_secs(1), "slowest check {slowest:?}");
    format!("clean safe; {}; slowest {slowest:.2?}", firsts.join(", "))
}

fn row(t: &TensorValue, i: usize) -> TensorValue {
    t.slice_axis(0, i)
}

fn logits(model: &GraphModel, inputs: &TensorMap) -> TensorValue {
    execute(model, inputs, 0).unwrap()[LOGITS].clone()
}

fn attack_semantics() -> String {
    let (m, _, k) = toy();
    let on = fixtures::toy_attention_inputs(2, 1, Some((ATTACKER, &POSITIONS)));
    let clean = logits(&m, &on);
    let get = inject(&m, &plan(AttackKind::Get { victim_index: VICTIM }, k)).unwrap();
    let set = inject(&m, &plan(AttackKind::Set { victim_index: VICTIM }, k)).unwrap();

    let y = logits(&get.model, &on);
    assert!(
        row(&y, ATTACKER).bit_eq(&row(&clean, VICTIM)),
        "get: attacker row differs from victim's"
    );
    assert!(
        row(&y, VICTIM).bit_eq(&row(&clean, VICTIM)),
        "get: victim row disturbed"
    );
    let y = logits(&set.model, &on);
    assert!(
        row(&y, VICTIM).bit_eq(&row(&clean, ATTACKER)),
        "set: victim row differs from attacker's"
    );
    assert!(
        row(&y, ATTACKER).bit_eq(&row(&clean, ATTACKER)),
        "set: attacker row disturbed"
    );

    let trials = 100;
    for seed in 0..trials {
        let off = fixtures::toy_attention_inputs(2, 1000 + seed, None);
        let clean = logits(&m, &off);
        for inj in [&get, &set] {
            assert!(
                logits(&inj.model, &off).bit_eq(&clean),
                "fired on untriggered input {seed}"
            );
        }
    }
    format!("get and set rows bit-exact; dormant on {trials} random inputs")
}

fn dynquant_leak() -> String {
    let (m, config) = fixtures::dynquant_mlp();
    let v = check(&m, &config).unwrap();
    assert_eq!(v.verdict, Outcome::Leak);
    assert_eq!(v.first_tainted_node.as_deref(), Some("quantize"));
    for o in &v.outputs {
        assert_eq!(o.multi_user, o.elements, "{}: not every element multi-user", o.name);
    }
    let b1 = config.with_batch_size(&m, 1);
    assert_eq!(check(&m, &b1).unwrap().verdict, Outcome::Safe, "B=1 should be safe");
    let total: usize = v.outputs.iter().map(|o| o.elements).sum();
    format!("B=2 leak, {total}/{total} elements multi-user, first tainted `quantize`; B=1 safe")
}

fn soundness_fuzzing() -> String {
    let options = FuzzOptions::default();
    assert_eq!((options.graphs, options.trials, options.params.max_depth), (500, 20, 8));
    assert_eq!(options.params.batch_size, 2);
    let start = Instant::now();
    let s = fuzz_soundness(&options).unwrap();
    let t = start.elapsed();
    assert_eq!(s.graphs, 500);
    assert!(s.is_sound(), "counterexamples: {:?}", s.counterexamples);
    assert!(t < Duration::from_secs(600), "took {t:?}");
    format!(
        "{} graphs ({} safe), {} trials, 0 counterexamples in {t:.2?}",
        s.graphs, s.safe, s.trials_run
    )
}

fn injection_footprint() -> String {
    let (m, _, k) = toy();
    let get = inject(&m, &plan(AttackKind::Get { victim_index: VICTIM }, k)).unwrap();
    let both: Injection = inject(&get.model, &plan(AttackKind::Set { victim_index: VICTIM }, -k)).unwrap();
    let total = get.node_delta + both.node_delta;
    assert_eq!(both.model.nodes.len(), m.nodes.len() + total);
    assert!(get.node_delta <= 12, "get adds {}", get.node_delta);
    assert!(total <= 25, "get+set adds {total}");
    assert_eq!(total, 19);
    format!("get {} + set {} = {total} nodes", get.node_delta, both.node_delta)
}

fn steer_displacement() -> String {
    let (m, _, k) = toy();
    let scale = 0.75;
    let (attack, v) = steer_attack(scale);
    let inj = inject(&m, &plan(attack, k)).unwrap();
    let on = fixtures::toy_attention_inputs(2, 1, Some((ATTACKER, &POSITIONS)));
    let clean = logits(&m, &on);
    let y = logits(&inj.model, &on);
    assert!(row(&y, ATTACKER).bit_eq(&row(&clean, ATTACKER)), "attacker row moved");
    let (yv, cv) = (row(&y, VICTIM).to_f64_vec(), row(&clean, VICTIM).to_f64_vec());
    let mut worst = 0.0f64;
    for (i, (a, b)) in yv.iter().zip(&cv).enumerate() {
        let want = scale as f64 * v[i % TOY_VOCAB] as f64;
        worst = worst.max((a - b - want).abs());
    }
    assert!(worst <= 1e-6, "max deviation {worst}");
    for seed in 0..20 {
        let off = fixtures::toy_attention_inputs(2, 2000 + seed, None);
        let d: Vec<f64> = logits(&inj.model, &off)
            .to_f64_vec()
            .iter()
            .zip(logits(&m, &off).to_f64_vec())
            .map(|(a, b)| a - b)
            .collect();
        assert!(d.iter().all(|&x| x == 0.0), "untriggered difference nonzero");
    }
    format!("max deviation {worst:.1e}; untriggered difference zero")
}

fn performance() -> String {
    let (m, config) = fixtures::stacked_attention(8);
    let nodes = m.nodes.len();
    assert!((180..=220).contains(&nodes), "{nodes} nodes");
    let start = Instant::now();
    let v = check(&m, &config).unwrap();
    let t = start.elapsed();
    assert_eq!(v.verdict, Outcome::Safe);
    assert!(t < Duration::from_secs(5), "took {t:?}");
    format!("{nodes} nodes checked in {t:.2?}")
}

type Criterion = (&'static str, fn() -> String);

#[test]
fn acceptance() {
    let criteria: [Criterion; 8] = [
        ("monoid laws", monoid_laws),
        ("attack detection", attack_detection),
        ("attack semantics", attack_semantics),
        ("dynamic quantization leak", dynquant_leak),
        ("soundness fuzzing", soundness_fuzzing),
        ("injection footprint", injection_footprint),
        ("steer displacement", steer_displacement),
        ("performance", performance),
    ];
    // written to the raw handle so the lines survive libtest's capture
    let mut err = std::io::stderr();
    let mut failed = vec![];
    let _ = writeln!(err);
    for (name, f) in criteria {
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(detail) => {
                let _ = writeln!(err, "PASS {name}: {detail}");
            }
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                let _ = writeln!(err, "FAIL {name}: {msg}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
