use super::*;
use crate::model::{log_prob_terms, zoo, PlateBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build(graph: &Arc<TemplateGraph>, scheme: Scheme, enc: usize, seed: u64) -> VariationalFamily {
    let cfg = FamilyConfig {
        scheme,
        encoding_dim: enc,
        flow: FlowConfig::affine(vec![8]),
        encoder_hidden: vec![8],
        ..FamilyConfig::default()
    };
    VariationalFamily::build(graph.clone(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn perturb(fam: &mut VariationalFamily, rng: &mut ChaCha8Rng) {
    let store = fam.store_mut();
    for id in store.ids().collect::<Vec<_>>() {
        let mut v = store.value(id).clone();
        v.data_mut()
            .iter_mut()
            .for_each(|x| *x += rng.random_range(-0.3..0.3));
        store.set_value(id, v);
    }
}

fn scaled_logq(
    fam: &VariationalFamily,
    full: &GroundModel,
    batch: &PlateBatch,
    noise: &Noise,
    data: &Assignment,
) -> Vec<f64> {
    let tape = Tape::untracked();
    let bound = fam.store().bind(&tape);
    let layout = BatchLayout::new(fam.graph(), full.cards(), batch).unwrap();
    let slice = data.slice(&layout).unwrap();
    let enc = fam.encodings(&tape, &bound, &layout, Some(&slice)).unwrap();
    let post = fam
        .sample_and_logq(&tape, &bound, &layout, &enc, &noise.slice(&layout).unwrap())
        .unwrap();
    tape.value(post.scaled_logq(&tape, full, &layout).unwrap())
        .into_data()
}

fn all_batches(cards: &[usize], reduced: &[usize]) -> Vec<PlateBatch> {
    fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        if n < k {
            return vec![];
        }
        let mut out = subsets(n - 1, k);
        for mut s in subsets(n - 1, k - 1) {
            s.push(n - 1);
            out.push(s);
        }
        out
    }
    let mut out: Vec<Vec<Vec<usize>>> = vec![vec![]];
    for (&c, &r) in cards.iter().zip(reduced) {
        let mut next = Vec::new();
        for prefix in &out {
            for s in subsets(c, r) {
                let mut p = prefix.clone();
                p.push(s);
                next.push(p);
            }
        }
        out = next;
    }
    out.into_iter()
        .map(|i| PlateBatch::new(cards, i).unwrap())
        .collect()
}

#[test]
fn encoding_store_enumeration() {
    let g = Arc::new(zoo::gre(8, 100, 10, 2, 10).unwrap());
    let fam = build(&g, Scheme::PaviF, 8, 0);
    let EncodingSource::Free(store) = fam.source() else {
        panic!()
    };
    let shapes: Vec<(usize, Vec<usize>)> = store
        .arrays()
        .iter()
        .map(|a| (a.plates.len(), fam.store().value(a.param).shape().to_vec()))
        .collect();
    assert_eq!(shapes, vec![(0, vec![1, 8]), (1, vec![100, 8])]);
}

#[test]
fn unit_cards_give_two_encodings() {
    let g = Arc::new(zoo::gre(2, 1, 1, 1, 1).unwrap());
    let fam = build(&g, Scheme::PaviF, 5, 0);
    let EncodingSource::Free(store) = fam.source() else {
        panic!()
    };
    assert_eq!(store.weight_count(), 10);
}

#[test]
fn per_template_layout_splits_arrays() {
    let g = Arc::new(zoo::gre(1, 4, 2, 2, 1).unwrap());
    let cfg = FamilyConfig {
        encoding_layout: EncodingLayout::PerTemplate,
        ..FamilyConfig::default()
    };
    let fam = VariationalFamily::build(g, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(fam.store().find("encodings.theta1").is_some());
    assert!(fam.store().find("encodings.theta2").is_some());
}

#[test]
fn identity_init_logq_is_prior() {
    let g = Arc::new(zoo::gre(2, 3, 2, 2, 1).unwrap());
    let full = GroundModel::full(g.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = full.sample_prior(&mut rng).unwrap().observed_only(&g);
    for scheme in [Scheme::PaviF, Scheme::PaviE, Scheme::SviBaseline] {
        let fam = build(&g, scheme, 4, 2);
        let tape = Tape::untracked();
        let bound = fam.store().bind(&tape);
        let layout = BatchLayout::new(&g, full.cards(), &full.full_batch()).unwrap();
        let slice = data.slice(&layout).unwrap();
        let enc = fam.encodings(&tape, &bound, &layout, Some(&slice)).unwrap();
        let noise = Noise::draw(&g, &layout, 3, &mut rng);
        let post = fam
            .sample_and_logq(&tape, &bound, &layout, &enc, &noise)
            .unwrap();
        let lp = log_prob_terms(&tape, &g, &layout, &post.values, 3).unwrap();
        for t in g.latent_ids() {
            let q = tape.value(post.logq[t.0].unwrap()).into_data();
            let p = tape.value(lp[t.0].unwrap()).into_data();
            for (a, b) in q.iter().zip(&p) {
                assert!((a - b).abs() < 1e-10, "{scheme:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn full_batch_matches_full_sampling() {
    let g = Arc::new(zoo::gre(2, 3, 2, 2, 1).unwrap());
    let full = GroundModel::full(g.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = full.sample_prior(&mut rng).unwrap().observed_only(&g);
    let mut fam = build(&g, Scheme::PaviF, 3, 6);
    perturb(&mut fam, &mut rng);
    let noise = Noise::draw_full(&full, 4, &mut rng).unwrap();

    let tape = Tape::untracked();
    let bound = fam.store().bind(&tape);
    let layout = BatchLayout::new(&g, full.cards(), &full.full_batch()).unwrap();
    let enc = fam.encodings(&tape, &bound, &layout, None).unwrap();
    let post = fam
        .sample_and_logq(&tape, &bound, &layout, &enc, &noise)
        .unwrap();
    let mut direct = [0.0; 4];
    for lq in post.logq.iter().flatten() {
        for (acc, v) in direct.iter_mut().zip(tape.value(*lq).data()) {
            *acc += v;
        }
    }
    let via_batch = scaled_logq(&fam, &full, &full.full_batch(), &noise, &data);
    for (a, b) in direct.iter().zip(&via_batch) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn batch_average_of_scaled_logq_is_full_logq() {
    let g = Arc::new(zoo::toy().unwrap());
    let full = GroundModel::full(g.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = full.sample_prior(&mut rng).unwrap().observed_only(&g);
    for scheme in [Scheme::PaviF, Scheme::SviBaseline] {
        let mut fam = build(&g, scheme, 3, 8);
        perturb(&mut fam, &mut rng);
        let noise = Noise::draw_full(&full, 2, &mut rng).unwrap();
        let batches = all_batches(full.cards(), &g.reduced_cards());
        assert_eq!(batches.len(), 6);
        let reference = scaled_logq(&fam, &full, &full.full_batch(), &noise, &data);
        let mut mean = [0.0; 2];
        for b in &batches {
            for (m, v) in mean
                .iter_mut()
                .zip(scaled_logq(&fam, &full, b, &noise, &data))
            {
                *m += v / batches.len() as f64;
            }
        }
        for (a, b) in mean.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10, "{scheme:?}: {a} vs {b}");
        }
    }
}

#[test]
fn untouched_encoding_rows_get_zero_gradient() {
    let g = Arc::new(zoo::gre(2, 3, 2, 1, 1).unwrap());
    let full = GroundModel::full(g.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut fam = build(&g, Scheme::PaviF, 3, 1);
    perturb(&mut fam, &mut rng);
    let batch = PlateBatch::new(full.cards(), vec![vec![1], vec![0]]).unwrap();
    let layout = BatchLayout::new(&g, full.cards(), &batch).unwrap();
    let noise = Noise::draw(&g, &layout, 2, &mut rng);
    let tape = Tape::new();
    let bound = fam.store().bind(&tape);
    let enc = fam.encodings(&tape, &bound, &layout, None).unwrap();
    let post = fam
        .sample_and_logq(&tape, &bound, &layout, &enc, &noise)
        .unwrap();
    let loss = tape.sum(post.scaled_logq(&tape, &full, &layout).unwrap());
    let grads = tape.backward(loss).unwrap();
    fam.store_mut().store_grads(&grads, &bound);
    let id = fam.store().find("encodings.[P1]").unwrap();
    let gr = &fam.store().get(id).grad;
    assert_eq!(gr.row(0), &[0.0; 3]);
    assert_eq!(gr.row(2), &[0.0; 3]);
    assert!(gr.row(1).iter().any(|&v| v != 0.0));
}

#[test]
fn parameter_count_law() {
    let base = |card| Arc::new(zoo::gre(8, card, 10, 2, 10).unwrap());
    let count = |s, card| build(&base(card), s, 8, 0).parameter_count();
    let f: Vec<usize> = [2, 20, 200]
        .iter()
        .map(|&c| count(Scheme::PaviF, c))
        .collect();
    assert_eq!(f[1] - f[0], 18 * 8);
    assert_eq!(f[2] - f[1], 180 * 8);
    let e: Vec<usize> = [2, 20, 200]
        .iter()
        .map(|&c| count(Scheme::PaviE, c))
        .collect();
    assert_eq!(e[0], e[1]);
    assert_eq!(e[1], e[2]);
}

#[test]
fn memory_guard_is_a_config_error() {
    let g = Arc::new(zoo::gre(2, 3, 2, 2, 1).unwrap());
    let full = GroundModel::full(g.clone());
    let cfg = FamilyConfig {
        max_sample_values: 10,
        ..FamilyConfig::default()
    };
    let fam = VariationalFamily::build(g.clone(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tape = Tape::untracked();
    let bound = fam.store().bind(&tape);
    let layout = BatchLayout::new(&g, full.cards(), &full.full_batch()).unwrap();
    let enc = fam.encodings(&tape, &bound, &layout, None).unwrap();
    let noise = Noise::draw(&g, &layout, 8, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(
        fam.sample_and_logq(&tape, &bound, &layout, &enc, &noise),
        Err(Error::Config(_))
    ));
}

#[test]
fn scheme_names_round_trip() {
    for s in [Scheme::PaviF, Scheme::PaviE, Scheme::SviBaseline] {
        assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
    }
    assert!(matches!("pavi".parse::<Scheme>(), Err(Error::Config(_))));
}
