use std::sync::OnceLock;

use metaprompt::cmpg::{self, PromptVars};
use metaprompt::decoder;
use metaprompt::evalkit::{generate_synthetic, run_ablation, AblationData, AblationPlan, SyntheticData, SyntheticDomainSpec};
use metaprompt::fai::MemoryBank;
use metaprompt::graph::Graph;
use metaprompt::model::PreparedEpisode;
use metaprompt::rct::{CategoryExpander, ExpanderConfig, Lexicon, Polarity};
use metaprompt::tensor::Tensor;
use metaprompt::training::{self, loss_from_logits, AugmentConfig, FinetuneConfig, LossConfig, MetricsLog, SupportPool, TrainConfig};
use metaprompt::{Error, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data() -> &'static SyntheticData {
    static DATA: OnceLock<SyntheticData> = OnceLock::new();
    DATA.get_or_init(|| {
        let spec = SyntheticDomainSpec { train_episodes: 10, eval_episodes: 4, finetune_pairs: 3, max_shots: 2, ..Default::default() };
        generate_synthetic(&spec).unwrap()
    })
}

fn model_with(config: ModelConfig) -> Model {
    Model::new(config, CategoryExpander::offline(SyntheticDomainSpec::default().lexicon())).unwrap()
}

fn model() -> Model {
    model_with(ModelConfig::default())
}

/// Moves every parameter off its initial value and fills the bank, so no path
/// is silenced by a zero initialization.
fn jostle(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for n in &names {
        for v in model.params.get_mut(n).unwrap().data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let (t, c) = (model.config.fai.slots, model.config.feature_dim);
    let slots = (0..t * c).map(|_| rng.random_range(0.1..3.0)).collect();
    model.bank = MemoryBank::from_slots(t, c, slots, model.config.fai.alpha, model.config.fai.tau).unwrap();
}

fn prepared(model: &Model, shots: usize) -> PreparedEpisode {
    let ep = data().source_heldout.iter().find(|e| e.shots() >= shots).expect("an episode with enough shots");
    model.prepare(&ep.with_shots(shots).unwrap()).unwrap()
}

fn mean_loss(model: &Model, prepared: &[PreparedEpisode]) -> f64 {
    let cfg = LossConfig::default();
    let total: f64 = prepared
        .iter()
        .map(|p| {
            let mut g = Graph::new();
            let mut bank = model.bank.clone();
            let logits = model.forward(&mut g, &model.params, &mut bank, p, false).unwrap();
            let l = loss_from_logits(&mut g, logits, p.query_mask.as_ref().unwrap(), &cfg).unwrap();
            g.value(l).item()
        })
        .sum();
    total / prepared.len() as f64
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr: 1e-3, ..TrainConfig::default() }
}

#[test]
fn every_generator_parameter_receives_gradient() {
    let mut m = model();
    jostle(&mut m, 11);
    let p = prepared(&m, 2);
    let mut g = Graph::new();
    let mut bank = m.bank.clone();
    let logits = m.forward(&mut g, &m.params, &mut bank, &p, true).unwrap();
    let l = loss_from_logits(&mut g, logits, p.query_mask.as_ref().unwrap(), &LossConfig::default()).unwrap();
    let grads = g.param_grads(&g.backward(l));
    let mut seen = 0;
    for name in m.params.names().filter(|n| n.starts_with("cmpg.")) {
        let grad = grads.get(name).unwrap_or_else(|| panic!("{name} is not on the graph"));
        assert!(grad.data().iter().any(|v| *v != 0.0), "{name} has an all-zero gradient");
        seen += 1;
    }
    assert!(seen > 10);
}

fn prompt_shapes(m: &Model, p: &PreparedEpisode) -> (Vec<usize>, Vec<usize>) {
    let dims = m.config.cmpg_dims();
    let mut g = Graph::new();
    let consts = |g: &mut Graph, vs: &[Vec<f64>]| -> Vec<_> { vs.iter().map(|v| g.constant(Tensor::new(&[v.len()], v.clone()))).collect() };
    let fg = consts(&mut g, &p.fg_protos);
    let bg = consts(&mut g, &p.bg_protos);
    let p_fg = cmpg::enhance_prototypes(&mut g, &m.params, Polarity::Foreground, &fg).unwrap();
    let p_bg = cmpg::enhance_prototypes(&mut g, &m.params, Polarity::Background, &bg).unwrap();
    let sem = cmpg::compose_semantic(&mut g, &m.params, p_fg, p_bg).unwrap();
    let mask = cmpg::encode_mask_prompt(&mut g, &m.params, p.support_priors.clone()).unwrap();
    let fq = g.constant(p.query_features.to_tensor());
    let out = cmpg::align_prompts(&mut g, &m.params, &dims, sem, mask, fq).unwrap();
    (g.value(out.dense).shape().to_vec(), g.value(out.sparse).shape().to_vec())
}

#[test]
fn prompt_shapes_do_not_depend_on_shots_or_negatives() {
    let mut shapes = Vec::new();
    for j in [1, 3] {
        let m = model_with(ModelConfig { negatives: j, ..ModelConfig::default() });
        for k in [1, 2] {
            shapes.push(prompt_shapes(&m, &prepared(&m, k)));
        }
    }
    let d = ModelConfig::default();
    let g = d.grid();
    assert_eq!(shapes[0], (vec![d.prompt_dim, g, g], vec![d.sparse_tokens, d.prompt_dim]));
    assert!(shapes.iter().all(|s| *s == shapes[0]), "{shapes:?}");
}

#[test]
fn another_categorys_prompt_changes_the_logits() {
    let mut m = model();
    training::train_source(&mut m, &data().source_train, &tiny_train(1), &mut MetricsLog::new()).unwrap();
    let eps = &data().source_train;
    let a = m.prepare(&eps[0].with_shots(1).unwrap()).unwrap();
    let other = eps.iter().find(|e| e.category != eps[0].category).unwrap();
    let b = m.prepare(&other.with_shots(1).unwrap()).unwrap();
    let mut mixed = a.clone();
    mixed.fg_protos = b.fg_protos.clone();
    mixed.bg_protos = b.bg_protos.clone();
    mixed.support_priors = b.support_priors.clone();
    let (la, lm) = (m.logits(&a).unwrap(), m.logits(&mixed).unwrap());
    let diff = la.values.iter().zip(&lm.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-3, "max logit change {diff:e}");
}

#[test]
fn prompt_gradients_match_finite_differences() {
    let mut m = model();
    jostle(&mut m, 5);
    let d = m.config.decoder_dims();
    let cfg = m.config.clone();
    let g0 = cfg.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rand_t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let input = rand_t(&[d.in_channels, g0, g0]);
    let dense = rand_t(&[cfg.prompt_dim, g0, g0]);
    let sparse = rand_t(&[cfg.sparse_tokens, cfg.prompt_dim]);
    let weights = rand_t(&[1, cfg.image_size, cfg.image_size]);
    let objective = |dense: &Tensor, sparse: &Tensor| -> (f64, Option<(Tensor, Tensor)>) {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let pv = PromptVars { dense: g.variable(dense.clone()), sparse: g.variable(sparse.clone()) };
        let logits = decoder::decode(&mut g, &m.params, x, Some(pv), cfg.image_size, cfg.image_size).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.mul(logits, w);
        let l = g.sum(prod);
        let grads = g.backward(l);
        let pair = (grads.wrt(pv.dense).unwrap().clone(), grads.wrt(pv.sparse).unwrap().clone());
        (g.value(l).item(), Some(pair))
    };
    let (_, an) = objective(&dense, &sparse);
    let (an_dense, an_sparse) = an.unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        let n = if which == 0 { dense.len() } else { sparse.len() };
        for _ in 0..8 {
            let i = rng.random_range(0..n);
            let (mut up, mut down) = ((dense.clone(), sparse.clone()), (dense.clone(), sparse.clone()));
            let (u, dn) = if which == 0 { (&mut up.0, &mut down.0) } else { (&mut up.1, &mut down.1) };
            u.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            let fd = (objective(&up.0, &up.1).0 - objective(&down.0, &down.1).0) / (2.0 * h);
            let a = if which == 0 { an_dense.data()[i] } else { an_sparse.data()[i] };
            assert!(a != 0.0 || fd.abs() < 1e-9);
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-8));
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn one_epoch_lowers_the_loss() {
    let mut m = model();
    let eps = &data().source_train;
    assert_eq!(eps.len(), 10);
    let prep: Vec<_> = eps.iter().map(|e| m.prepare(&e.with_shots(1).unwrap()).unwrap()).collect();
    let before = mean_loss(&m, &prep);
    let one: Vec<_> = eps.iter().map(|e| e.with_shots(1).unwrap()).collect();
    training::train_source(&mut m, &one, &TrainConfig { epochs: 1, ..TrainConfig::default() }, &mut MetricsLog::new()).unwrap();
    let after = mean_loss(&m, &prep);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn zero_epochs_leave_the_model_at_initialization() {
    let mut m = model();
    let mut log = MetricsLog::new();
    let history = training::train_source(&mut m, &data().source_train, &tiny_train(0), &mut log).unwrap();
    assert!(history.epoch_loss.is_empty() && log.lines().is_empty());
    let fresh = model();
    assert_eq!(m.params, fresh.params);
    assert_eq!(m.bank, fresh.bank);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut m = model();
        let mut log = MetricsLog::new();
        training::train_source(&mut m, &data().source_train, &tiny_train(2), &mut log).unwrap();
        let ft = FinetuneConfig { train: tiny_train(1), ..FinetuneConfig::default() };
        training::finetune_target(&mut m, &data().target_finetune, &ft, &mut log).unwrap();
        (m.params.digest(), m.bank.slots().to_vec(), log.render())
    };
    assert_eq!(run(), run());
}

#[test]
fn flipped_pseudo_query_mirrors_its_support() {
    let pools = &data().target_finetune;
    let eps = training::pseudo_episodes(pools, 1, &AugmentConfig::flip_only(), 3, 0).unwrap();
    assert_eq!(eps.len(), pools.iter().map(|p| p.pairs.len()).sum::<usize>());
    for ep in &eps {
        let (img, mask) = &ep.support[0];
        let (q, qm) = (&ep.query, ep.query_mask.as_ref().unwrap());
        let (h, w) = (img.height(), img.width());
        for y in 0..h {
            for x in 0..w {
                assert_eq!(qm.get(y, x), mask.get(y, w - 1 - x));
                for c in 0..3 {
                    assert_eq!(q.at(c, y, x), img.at(c, y, w - 1 - x));
                }
            }
        }
    }
}

#[test]
fn fine_tuning_leaves_the_encoders_frozen() {
    let mut m = model();
    let imgs: Vec<_> = data().target_test.iter().map(|e| e.query.clone()).collect();
    let encode = |m: &Model| -> Vec<Vec<f64>> {
        let enc = m.encoders();
        imgs.iter()
            .flat_map(|i| [enc.image.encode(i).unwrap().values().to_vec(), enc.patches.encode(i).unwrap().values().to_vec()])
            .collect()
    };
    let before = encode(&m);
    let ft = FinetuneConfig { train: tiny_train(2), ..FinetuneConfig::default() };
    training::finetune_target(&mut m, &data().target_finetune, &ft, &mut MetricsLog::new()).unwrap();
    assert_ne!(m.params, model().params, "fine-tuning should move the trainable parameters");
    assert_eq!(encode(&m), before);
}

#[test]
fn empty_streams_and_zero_shots_are_config_errors() {
    let mut m = model();
    let err = training::train_source(&mut m, &[], &tiny_train(1), &mut MetricsLog::new()).unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
    let ft = FinetuneConfig { shots: 0, ..FinetuneConfig::default() };
    let err = training::finetune_target(&mut m, &data().target_finetune, &ft, &mut MetricsLog::new()).unwrap_err();
    assert!(matches!(err, Error::Config { ref key, .. } if key == "shots"), "{err}");
    let err = training::finetune_target(&mut m, &[], &FinetuneConfig::default(), &mut MetricsLog::new()).unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
    let empty = [SupportPool { category: "blue disk".into(), pairs: Vec::new() }];
    assert!(matches!(training::pseudo_episodes(&empty, 1, &AugmentConfig::default(), 0, 0), Err(Error::Config { .. })));
}

#[test]
fn disabled_alignment_ignores_the_bank() {
    let mut on = model();
    jostle(&mut on, 21);
    let mut off = model_with(ModelConfig { switches: ModelConfig::default().switches.without("fai").unwrap(), ..ModelConfig::default() });
    off.params = on.params.clone();
    off.bank = on.bank.clone();
    let p = prepared(&on, 1);
    let reference = (on.logits(&p).unwrap(), off.logits(&p).unwrap());
    let (t, c) = (on.config.fai.slots, on.config.feature_dim);
    let other = MemoryBank::from_slots(t, c, vec![0.5; t * c], on.config.fai.alpha, on.config.fai.tau).unwrap();
    on.bank = other.clone();
    off.bank = other;
    assert_ne!(on.logits(&p).unwrap(), reference.0);
    assert_eq!(off.logits(&p).unwrap(), reference.1);
}

#[test]
fn disabled_generator_ignores_the_prototypes() {
    let mut m = model_with(ModelConfig { switches: ModelConfig::default().switches.without("cmpg").unwrap(), ..ModelConfig::default() });
    jostle(&mut m, 4);
    let p = prepared(&m, 1);
    let mut scrambled = p.clone();
    scrambled.fg_protos.iter_mut().chain(scrambled.bg_protos.iter_mut()).for_each(|v| v.iter_mut().for_each(|x| *x = -*x));
    assert_eq!(m.logits(&p).unwrap(), m.logits(&scrambled).unwrap());
}

#[test]
fn disabled_expansion_never_consults_the_lexicon() {
    let strict = ExpanderConfig { fallback: false, ..ExpanderConfig::default() };
    let ep = data().source_train[0].with_shots(1).unwrap();
    let on = Model::new(ModelConfig::default(), CategoryExpander::new(strict.clone(), Lexicon::new())).unwrap();
    let err = on.predict(&ep).unwrap_err();
    assert!(matches!(err, Error::Expansion { .. }), "{err}");
    let config =
        ModelConfig { switches: ModelConfig::default().switches.without("rct_semantic_expansion").unwrap(), ..ModelConfig::default() };
    let off = Model::new(config, CategoryExpander::new(strict, Lexicon::new())).unwrap();
    assert_eq!(off.predict(&ep).unwrap().height(), ep.query.height());
}

#[test]
fn empty_switch_list_gives_only_the_full_row() {
    let plan = AblationPlan {
        model: ModelConfig::default(),
        expander: ExpanderConfig::default(),
        lexicon: SyntheticDomainSpec::default().lexicon(),
        train: tiny_train(1),
        finetune: None,
        eval_shots: 1,
    };
    let d = data();
    let (report, logs) =
        run_ablation(&plan, &[], &AblationData { source: &d.source_train[..3], pools: &[], test: &d.target_test }).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].label, "full");
    assert_eq!(report.rows[0].delta, 0.0);
    assert_eq!(logs.keys().collect::<Vec<_>>(), ["full"]);
    let err =
        run_ablation(&plan, &["fai.warp".to_string()], &AblationData { source: &d.source_train[..3], pools: &[], test: &d.target_test });
    assert!(matches!(err, Err(Error::Config { .. })));
}
