use mtlse::mtl::{cycle_loss, Framework, LossWeights, ModelConfig, MtlModel, Pooling};
use mtlse::ndgrad::Graph;
use mtlse::textdata::{Batch, Dataset, EmbeddingTable, Example, Vocabulary};
use mtlse::trainer::grad_check_model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 12;

fn model(framework: Framework, pooling: Pooling, hidden: usize, seed: u64) -> MtlModel {
    model_scaled(framework, pooling, hidden, seed, 1.5)
}

fn model_scaled(framework: Framework, pooling: Pooling, hidden: usize, seed: u64, scale: f64) -> MtlModel {
    let cfg = ModelConfig {
        framework,
        pooling,
        hidden,
        mlp_hidden: 6,
        tasks: vec![("a".into(), 2), ("b".into(), 3)],
    };
    let vocab = Vocabulary::from_tokens((0..VOCAB).map(|i| format!("w{i}")));
    let emb = EmbeddingTable::random(vocab.len(), 5, scale, seed + 100).unwrap();
    MtlModel::new(&cfg, vocab, emb, seed).unwrap()
}

fn dataset(task: &str, n: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sent = || -> Vec<usize> {
        let len = rng.gen_range(1..7);
        (0..len).map(|_| rng.gen_range(2..VOCAB + 2)).collect()
    };
    Dataset {
        task: task.into(),
        examples: (0..n)
            .map(|i| Example {
                task: task.into(),
                tokens1: sent(),
                tokens2: sent(),
                label: i % classes,
            })
            .collect(),
    }
}

fn two_batches(seed: u64, n: usize) -> (Batch, Batch) {
    let a = dataset("a", n, 2, seed);
    let b = dataset("b", n, 3, seed + 1);
    let ids: Vec<usize> = (0..n).collect();
    (Batch::from_ids(&a, &ids).unwrap(), Batch::from_ids(&b, &ids).unwrap())
}

fn weights(beta: f64, gamma: f64, lambda: f64) -> LossWeights {
    LossWeights {
        beta,
        gamma,
        lambda,
        ..LossWeights::default()
    }
}

#[test]
fn fused_gradient_is_task_minus_reversed_adversary_plus_diff() {
    let m = model(Framework::Asp, Pooling::Max, 4, 3);
    let (ba, bb) = two_batches(5, 6);
    let cycle = [(0, &ba), (1, &bb)];
    let (beta, gamma, lambda) = (0.3, 0.7, 0.6);

    let mut g = Graph::new();
    let fused = cycle_loss(&mut g, &m, &cycle, &weights(beta, gamma, lambda)).unwrap();
    let fused = g.backward(fused.total).unwrap().param_grads(&g, &m.store);

    // λ = −1 turns the reversal into a plain identity, so the adversarial pass
    // below carries the ordinary gradient of L_adv.
    let mut g = Graph::new();
    let parts = cycle_loss(&mut g, &m, &cycle, &weights(1.0, 1.0, -1.0)).unwrap();
    let task_sum = {
        let losses: Vec<_> = parts.forwards.iter().map(|f| f.loss).collect();
        let cat = g.concat_cols(&losses).unwrap();
        g.sum(cat).unwrap()
    };
    let task = g.backward(task_sum).unwrap().param_grads(&g, &m.store);
    let adv = g.backward(parts.adv.unwrap()).unwrap().param_grads(&g, &m.store);
    let diff = g.backward(parts.diff.unwrap()).unwrap().param_grads(&g, &m.store);

    let disc: Vec<_> = {
        let d = m.disc.as_ref().unwrap();
        vec![d.w.index(), d.b.index()]
    };
    for (i, f) in fused.iter().enumerate() {
        let name = m.store.name(m.store.ids().nth(i).unwrap());
        // the discriminator sits above the reversal and minimizes β·L_adv directly
        let sign = if disc.contains(&i) { beta } else { -beta * lambda };
        for k in 0..f.len() {
            let want = task[i].data()[k] + sign * adv[i].data()[k] + gamma * diff[i].data()[k];
            assert!(
                (f.data()[k] - want).abs() <= 1e-10,
                "{name}[{k}]: fused {} vs assembled {want}",
                f.data()[k]
            );
        }
    }
}

#[test]
fn batch_losses_do_not_depend_on_example_order() {
    let m = model(Framework::Asp, Pooling::Max, 3, 8);
    let a = dataset("a", 7, 2, 9);
    let b = dataset("b", 7, 3, 10);
    let loss_with = |order: &[usize]| {
        let (ba, bb) = (Batch::from_ids(&a, order).unwrap(), Batch::from_ids(&b, order).unwrap());
        let mut g = Graph::new();
        let cl = cycle_loss(&mut g, &m, &[(0, &ba), (1, &bb)], &weights(0.1, 0.05, 1.0)).unwrap();
        cl.breakdown(&g)
    };
    let base = loss_with(&[0, 1, 2, 3, 4, 5, 6]);
    let shuffled = loss_with(&[4, 6, 0, 3, 1, 5, 2]);
    for (x, y) in base.task.iter().zip(&shuffled.task) {
        assert!((x - y).abs() <= 1e-12);
    }
    assert!((base.adv - shuffled.adv).abs() <= 1e-12);
    assert!((base.diff - shuffled.diff).abs() <= 1e-12);
    assert!((base.total - shuffled.total).abs() <= 1e-12);
}

#[test]
fn full_asp_objective_passes_finite_differences() {
    let mut m = model_scaled(Framework::Asp, Pooling::Max, 3, 21, 4.0);
    let (ba, bb) = two_batches(22, 3);
    let r = grad_check_model(&mut m, &[(0, &ba), (1, &bb)], &weights(0.1, 0.05, 1.0), 1e-5).unwrap();
    assert!(r.max_rel() < 1e-4, "{r}");
}

#[test]
fn biattentive_sp_objective_passes_finite_differences() {
    let mut m = model_scaled(Framework::Sp, Pooling::Biattentive, 2, 31, 4.0);
    let (ba, bb) = two_batches(32, 2);
    let r = grad_check_model(&mut m, &[(0, &ba), (1, &bb)], &weights(0.0, 0.1, 1.0), 1e-5).unwrap();
    assert!(r.max_rel() < 1e-4, "{r}");
}

#[test]
fn sp_and_zero_weight_asp_share_their_trajectory() {
    let sp = model(Framework::Sp, Pooling::Max, 3, 40);
    let asp = model(Framework::Asp, Pooling::Max, 3, 40);
    let (ba, bb) = two_batches(41, 5);
    let cycle = [(0, &ba), (1, &bb)];
    let step = |m: &mut MtlModel| -> f64 {
        let mut g = Graph::new();
        let cl = cycle_loss(&mut g, m, &cycle, &weights(0.0, 0.0, 1.0)).unwrap();
        let total = g.value(cl.total).data()[0];
        let grads = g.backward(cl.total).unwrap().param_grads(&g, &m.store);
        mtlse::trainer::sgd_step(&mut m.store, &grads, 0.1).unwrap();
        total
    };
    let (mut sp, mut asp) = (sp, asp);
    for _ in 0..5 {
        assert_eq!(step(&mut sp).to_bits(), step(&mut asp).to_bits());
    }
    for id in sp.store.ids() {
        let name = sp.store.name(id);
        let other = asp.store.find(name).unwrap();
        assert_eq!(sp.store.get(id), asp.store.get(other), "{name}");
    }
}
