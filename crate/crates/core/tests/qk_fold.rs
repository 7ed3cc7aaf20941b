//! Rotation-folded keys reproduce the engine's attention logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use routelens_core::circuits::KeyFolder;
use routelens_core::engine::{self, circuit_matrices, OverrideSet, Recording};
use routelens_core::planted::{random_bundle, random_tokens, RandomSpec};

#[test]
fn folded_keys_match_rotary_logits() {
    let bundle = random_bundle(&RandomSpec::llama(2, 4, 2, 8, 50), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for len in [1, 7, 19] {
        let ids = random_tokens(&bundle, len, &mut rng);
        let trace = engine::run(&bundle, &ids, &OverrideSet::new(), &Recording::all()).unwrap();
        for (layer, head) in [(0, 0), (1, 3)] {
            let folder = KeyFolder::new(&bundle, layer, head).unwrap();
            let (r_q, keys) = folder.query_and_keys(&bundle, &ids).unwrap();
            let w = circuit_matrices(&bundle, layer, head).unwrap().w_qk;
            let q = w.vec_mul(&r_q).unwrap();
            let scores = trace.attn_scores(layer, head).unwrap();
            let last = trace.last();
            for j in 0..=last {
                let got = routelens_core::tensor::dot(&q, keys.row(j));
                let want = f64::from(scores.get(last, j));
                assert!(
                    (got - want).abs() <= 1e-4 * (1.0 + want.abs()),
                    "L{layer}H{head} len {len} j {j}: {got} vs {want}"
                );
            }
        }
    }
}
