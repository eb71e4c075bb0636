use ultramem::lm::{
    dense_param_count, preset, synthetic_text, Corpus, ForwardOptions, LmConfig, Model, ParamGroup, Trainer, Variant,
};
use ultramem::tensor::stream_rng;
use ultramem::autodiff::Graph;
use ultramem::{Precision, Tensor};

fn small(variant: Variant) -> LmConfig {
    let mut cfg = preset("ultramem-tiny").unwrap();
    cfg.model.layers = 5;
    cfg.model.d_model = 32;
    cfg.model.attn_heads = 2;
    cfg.model.mlp_dim = 64;
    cfg.model.spans = vec![(3, 5)];
    cfg.train.seq_len = 8;
    cfg.train.batch = 2;
    let mem = cfg.memory.as_mut().unwrap();
    mem.d_key = 16;
    mem.d_value = 16;
    mem.side = 8;
    mem.topm = 4;
    match variant {
        Variant::Dense => {
            cfg.model.variant = Variant::Dense;
            cfg.model.spans.clear();
            cfg.memory = None;
        }
        Variant::Pkm => {
            let pkm = preset("pkm-tiny").unwrap();
            cfg.model.variant = Variant::Pkm;
            cfg.model.spans = vec![(3, 3)];
            cfg.model.memory_parallel = true;
            let mut mem = pkm.memory.unwrap();
            mem.d_key = 16;
            mem.d_value = 32;
            mem.side = 8;
            mem.topm = 4;
            cfg.memory = Some(mem);
        }
        Variant::Ultramem => {}
    }
    cfg.resolve();
    cfg.validate().unwrap();
    cfg
}

fn tokens(n: usize) -> Vec<usize> {
    (0..n).map(|k| (k * 37 + 11) % 258).collect()
}

fn run(model: &Model, opts: &ForwardOptions) -> (Tensor, Vec<Tensor>, Vec<Tensor>) {
    let mut g = Graph::new(Precision::F64);
    let vars = model.bind(&mut g, false);
    let out = model
        .forward(&mut g, &vars, &tokens(16), 8, opts, &mut stream_rng(0, "t"))
        .unwrap();
    (g.value(out.logits).clone(), out.hidden, out.mem_inputs)
}

#[test]
fn dense_parameter_count_matches_closed_form() {
    for cfg in [small(Variant::Dense), preset("dense-tiny").unwrap()] {
        let m = Model::build(&cfg).unwrap();
        let c = &cfg.model;
        assert_eq!(m.param_count(), dense_param_count(c.vocab, c.d_model, c.layers, c.mlp_dim));
        assert!(m.memories.is_empty());
    }
}

#[test]
fn zeroed_memory_reproduces_dense_forward_exactly() {
    let dense = Model::build(&small(Variant::Dense)).unwrap();
    let (want, _, _) = run(&dense, &ForwardOptions::default());
    for variant in [Variant::Ultramem, Variant::Pkm] {
        let model = Model::build(&small(variant)).unwrap();
        let zero = ForwardOptions {
            zero_memory: true,
            ..ForwardOptions::default()
        };
        let (got, _, _) = run(&model, &zero);
        assert_eq!(got, want, "{variant:?}");
        let (live, _, _) = run(&model, &ForwardOptions::default());
        assert_ne!(live, want);
    }
}

#[test]
fn perturbing_after_the_add_block_leaves_the_read_input_alone() {
    let model = Model::build(&small(Variant::Ultramem)).unwrap();
    let capture = ForwardOptions {
        capture: true,
        ..ForwardOptions::default()
    };
    let (_, hidden, reads) = run(&model, &capture);
    let (_, hidden2, reads2) = run(
        &model,
        &ForwardOptions {
            perturb: Some((5, 0.5)),
            ..capture.clone()
        },
    );
    assert_eq!(reads, reads2);
    assert_eq!(hidden[..4], hidden2[..4]);
    assert_ne!(hidden[4], hidden2[4]);
    let (_, _, reads3) = run(
        &model,
        &ForwardOptions {
            perturb: Some((2, 0.5)),
            ..capture
        },
    );
    assert_ne!(reads, reads3);
}

#[test]
fn only_value_tables_get_the_value_schedule() {
    let model = Model::build(&small(Variant::Ultramem)).unwrap();
    let values: Vec<String> = model
        .params()
        .into_iter()
        .filter(|p| p.group == ParamGroup::Values)
        .map(|p| p.name)
        .collect();
    assert_eq!(values, vec!["mem0.values".to_string()]);
    for p in model.params() {
        assert_eq!(p.decay, p.shape.len() >= 2, "{}", p.name);
    }
}

#[test]
fn aux_loss_is_zero_without_tucker_memory() {
    let text = synthetic_text(20_000, 1);
    for variant in [Variant::Dense, Variant::Pkm] {
        let cfg = small(variant);
        let corpus = Corpus::from_bytes(&text, cfg.train.seq_len + 1).unwrap();
        let mut t = Trainer::new(&cfg, Precision::F64).unwrap();
        for _ in 0..3 {
            assert_eq!(t.step_corpus(&corpus).unwrap().aux_loss, 0.0);
        }
    }
}

#[test]
fn single_batch_overfits() {
    let mut cfg = small(Variant::Dense);
    cfg.model.layers = 2;
    cfg.model.d_model = 64;
    cfg.model.attn_heads = 4;
    cfg.model.mlp_dim = 128;
    cfg.train.steps = 500;
    cfg.train.seq_len = 64;
    cfg.train.batch = 1;
    cfg.train.lr = 3e-3;
    let text = synthetic_text(65, 3);
    let x: Vec<usize> = text[..64].iter().map(|&b| b as usize).collect();
    let y: Vec<usize> = text[1..65].iter().map(|&b| b as usize).collect();
    let mut t = Trainer::new(&cfg, Precision::F64).unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..500 {
        last = t.step_on(&x, &y).unwrap().lm_loss;
    }
    assert!(last < 0.1, "final loss {last}");
}

#[test]
fn same_seed_gives_bitwise_identical_metrics() {
    let cfg = small(Variant::Ultramem);
    let corpus = Corpus::from_bytes(&synthetic_text(20_000, 2), cfg.train.seq_len + 1).unwrap();
    let trace = || {
        let mut t = Trainer::new(&cfg, Precision::F64).unwrap();
        (0..5)
            .map(|_| {
                let m = t.step_corpus(&corpus).unwrap();
                (m.lm_loss.to_bits(), m.aux_loss.to_bits(), m.grad_norm.to_bits())
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(trace(), trace());
}

#[test]
fn value_learning_rate_decays_from_ten_times() {
    let mut cfg = small(Variant::Ultramem);
    cfg.train.steps = 100;
    let t = Trainer::new(&cfg, Precision::F64).unwrap();
    let base = cfg.train.lr;
    assert_eq!(t.lr(0, ParamGroup::Values), 0.0);
    let mid = t.lr(50, ParamGroup::Values) / t.lr(50, ParamGroup::Base);
    assert!((mid - 5.5).abs() < 1e-12);
    assert!((t.lr(100, ParamGroup::Values) - 0.1 * base).abs() < 1e-15);
}

#[test]
fn bad_configs_are_rejected() {
    let good = small(Variant::Ultramem).to_toml().unwrap();
    assert!(LmConfig::from_toml(&good).is_ok());
    let bad = good.replace("[train]", "[train]\nwhat = 1");
    assert!(LmConfig::from_toml(&bad).unwrap_err().to_string().contains("what"));
    let mut cfg = small(Variant::Ultramem);
    cfg.model.spans = vec![(4, 3)];
    assert!(cfg.validate().is_err());
    cfg.model.spans = vec![(1, 3), (3, 4)];
    assert!(cfg.validate().is_err());
    cfg.model.spans = vec![(1, 6)];
    assert!(cfg.validate().is_err());
}
