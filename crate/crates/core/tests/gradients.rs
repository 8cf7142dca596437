use biogen_core::bpe::{TokenSeq, BOS, EOS};
use biogen_core::model::{seq2seq_nll, Dropout, ModelConfig, ModelParams, Net, PointerSymbol};
use biogen_core::train::{compute_gradients, Example};

fn config() -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 12,
        max_positions: 10,
        dropout_rate: 0.1,
        ner_types: 2,
    }
}

fn batch() -> Vec<Example> {
    vec![
        Example::Seq2Seq {
            source: vec![BOS, 7, 8, 9, EOS],
            target: vec![BOS, 11, 12, EOS],
        },
        Example::Pointer {
            source: TokenSeq::new(vec![BOS, 20, 21, 22, EOS], vec![false, true, false, true, false]),
            target: vec![PointerSymbol::Position(3), PointerSymbol::Type(1), PointerSymbol::Eos],
            n_types: 2,
        },
    ]
}

fn loss(p: &ModelParams<f64>, batch: &[Example]) -> f64 {
    let net = Net::new(p);
    let total: f64 = batch
        .iter()
        .map(|ex| match ex {
            Example::Seq2Seq { source, target } => seq2seq_nll(p, source, target).unwrap(),
            Example::Pointer { source, target, n_types } => {
                let mut t = net.tape();
                let l = net.pointer_loss(&mut t, source, *n_types, target, &mut Dropout::eval()).unwrap();
                t.scalar(l)
            }
        })
        .sum();
    total / batch.len() as f64
}

#[test]
fn every_entry_matches_small_step_central_difference() {
    let h = 1e-5;
    let mut p: ModelParams<f64> = ModelParams::<f32>::init_seeded(&config(), 9).unwrap().cast();
    let batch = batch();
    let (g, _) = compute_gradients(&p, &batch, None).unwrap();
    let mut worst = 0.0f64;
    for ti in 0..p.tensors.len() {
        for k in 0..p.tensors[ti].data.len() {
            let orig = p.tensors[ti].data[k];
            p.tensors[ti].data[k] = orig + h;
            let up = loss(&p, &batch);
            p.tensors[ti].data[k] = orig - h;
            let down = loss(&p, &batch);
            p.tensors[ti].data[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = g.tensors[ti].data[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{}[{k}]: analytic {a} vs numeric {fd}", p.tensor_name(ti));
        }
    }
    assert!(worst > 0.0);
}

#[test]
fn dropout_gradients_are_reproducible_and_differ_from_eval() {
    let p: ModelParams<f64> = ModelParams::<f32>::init_seeded(&config(), 9).unwrap().cast();
    let batch = batch();
    let (a, la) = compute_gradients(&p, &batch, Some(3)).unwrap();
    let (b, lb) = compute_gradients(&p, &batch, Some(3)).unwrap();
    let (e, le) = compute_gradients(&p, &batch, None).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.tensors, b.tensors);
    assert_ne!(la, le);
    assert_ne!(a.tensors, e.tensors);
}
