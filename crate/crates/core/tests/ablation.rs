mod common;

use candle_core::DType;
use common::checks::ablation_contract;
use common::{randomize, tiny_stage_one, uniform};
use devgest::deviation::{AblationFlags, StageOneConfig, StageOneModel};
use devgest::nn::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn each_flag_severs_its_pathway() {
    for f in ablation_contract() {
        assert!(f.holds, "{}: {}", f.name, f.detail);
    }
}

#[test]
fn flag_names_round_trip_through_labels() {
    let f = AblationFlags::from_names(&["w/o-dev", "disable_enhancer"]).unwrap();
    assert!(f.disable_deviation && f.disable_enhancer && !f.disable_motion_decoder);
    assert_eq!(f.label(), "disable_deviation+disable_enhancer");
    assert!(AblationFlags::from_names(&["w/o-everything"]).is_err());
}

#[test]
fn disabled_deviation_reduces_to_the_skip_path() {
    // With every gate at one the decoder output is the warped lifted image,
    // so the deeper scales cannot influence the result.
    let cfg = StageOneConfig {
        ablation: AblationFlags {
            disable_deviation: true,
            ..Default::default()
        },
        ..tiny_stage_one(16)
    };
    let mut store = ParamStore::new(DType::F64, 3);
    let model = StageOneModel::new(&mut store, &cfg).unwrap();
    randomize(&store, 4, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let src = uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let drv = uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let before = model.forward_pair(&src, &drv).unwrap();
    for v in store.vars_with_prefix("stage1.decoder.up") {
        v.set(&v.zeros_like().unwrap()).unwrap();
    }
    let after = model.forward_pair(&src, &drv).unwrap();
    let diff = (before - after).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
    assert_eq!(diff, 0.0);
}
