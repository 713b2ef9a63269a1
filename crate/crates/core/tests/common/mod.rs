#![allow(dead_code)]

use dsa_cyclegan::dsm::ReferenceBank;
use dsa_cyclegan::losses::LossWeights;
use dsa_cyclegan::nets::{FrozenSegmenter, Segmenter, SegmenterConfig, TranslatorConfig};
use dsa_cyclegan::synth::{Dataset, DatasetSpec, StainProfile};
use dsa_cyclegan::training::{ExperimentConfig, LrSchedule, ProtocolConfig, RunConfig, SegTrainConfig};
use dsa_cyclegan::variants::VariantParams;
use microlp::{ComparisonOp, OptimizationDirection, Problem};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tch::Device;

/// Optimal transport between two uniform empirical measures on the line,
/// solved as a linear program over the coupling matrix.
pub fn ot_lp(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> = a
        .iter()
        .map(|x| b.iter().map(|y| lp.add_var((x - y).abs(), (0.0, f64::INFINITY))).collect())
        .collect();
    for row in &vars {
        lp.add_constraint(row.iter().map(|v| (*v, 1.0)).collect::<Vec<_>>(), ComparisonOp::Eq, 1.0 / n as f64);
    }
    // The last column constraint is implied by the others.
    for j in 0..m - 1 {
        lp.add_constraint(vars.iter().map(|row| (row[j], 1.0)).collect::<Vec<_>>(), ComparisonOp::Eq, 1.0 / m as f64);
    }
    lp.solve().expect("feasible").into_solution().expect("solution").objective()
}

/// Samples with distinct values, so gradients are defined.
pub fn tie_free(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        if s.windows(2).all(|w| w[1] - w[0] > 1e-3) {
            return v;
        }
    }
}

pub fn tiny_data_spec() -> DatasetSpec {
    DatasetSpec {
        height: 16,
        width: 16,
        n_blobs: (1, 2),
        blob_radius_range: (1.5, 3.0),
        distractor_density: 0.6,
        base_seed: 7,
        n_train: 64,
        n_val: 16,
        n_test: 16,
    }
}

pub fn tiny_segmenter_config() -> SegmenterConfig {
    SegmenterConfig {
        in_channels: 3,
        base_filters: 4,
        depth: 2,
        n_classes: 2,
    }
}

pub fn tiny_translator() -> TranslatorConfig {
    TranslatorConfig {
        channels: 3,
        base_filters: 4,
        n_downsampling: 2,
        n_res_blocks: 1,
        disc_base_filters: 4,
        disc_layers: 2,
    }
}

pub fn tiny_run(variant: &str) -> RunConfig {
    RunConfig {
        variant: variant.into(),
        variant_params: VariantParams::with_segmenter("segmenter.bin"),
        weights: LossWeights::default(),
        translator: tiny_translator(),
        steps: 10,
        batch_size: 4,
        lr: 2e-4,
        beta1: 0.5,
        beta2: 0.999,
        lr_schedule: LrSchedule::ConstantThenLinearDecay,
        seeds: vec![1],
        replay_buffer_size: 6,
        dsm_layer: "bottleneck".into(),
        reference_bank_size: 16,
        checkpoint_every: 5,
    }
}

pub fn tiny_experiment() -> ExperimentConfig {
    ExperimentConfig {
        source_profile: StainProfile::Rich,
        data: tiny_data_spec(),
        segmenter_training: SegTrainConfig {
            segmenter: tiny_segmenter_config(),
            steps: 60,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            eval_every: 20,
            patience: 10,
            min_val_dice: 0.0,
        },
        run: RunConfig {
            steps: 4,
            seeds: vec![1, 2, 3],
            ..tiny_run("baseline")
        },
        protocol: ProtocolConfig {
            variants: vec!["baseline".into(), "dsa".into()],
            probe_sigma: 0.05,
        },
    }
}

/// A randomly initialised frozen segmenter with the tiny configuration.
pub fn random_segmenter(seed: i64) -> FrozenSegmenter {
    tch::manual_seed(seed);
    Segmenter::new(tiny_segmenter_config(), Device::Cpu).unwrap().freeze()
}

pub struct TinyWorld {
    pub data: Dataset,
    pub segmenter: FrozenSegmenter,
    pub bank: ReferenceBank,
}

/// Tiny dataset, random segmenter and a bank built from the source stream.
pub fn tiny_world() -> TinyWorld {
    let data = Dataset::generate(&tiny_data_spec()).unwrap();
    let segmenter = random_segmenter(3);
    let source = data.translation_streams(StainProfile::Rich).source;
    let bank = ReferenceBank::build(&segmenter, &source.narrow(0, 0, 16), "bottleneck", 16).unwrap();
    TinyWorld { data, segmenter, bank }
}
