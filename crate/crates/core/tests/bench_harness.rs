use drasmil::bench::{
    median, parse_csv, render_csv, render_table, run_bench, BenchConfig, BenchMethod, BenchReport,
    BufferTracker, LiveFeatures, PatchSource, SyntheticRaster,
};
use drasmil::sampler::{run_full, CachedFeatures};
use drasmil::slide::{Encoder, EncoderKind, SynthSpec};
use drasmil::{Bag, Matrix, ModelDims, ModelParams, SamplingConfig};
use proptest::prelude::*;

fn slides(sizes: &[(u32, u32)], patch: u32) -> Vec<SyntheticRaster> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &(w, h))| {
            let spec = SynthSpec {
                width: w,
                height: h,
                seed: i as u64,
                ..SynthSpec::default()
            };
            SyntheticRaster::new(&format!("b{i}"), (i % 2) as u8, &spec, patch).unwrap()
        })
        .collect()
}

fn config(batch_sizes: Vec<usize>) -> BenchConfig {
    BenchConfig {
        batch_sizes,
        methods: vec![BenchMethod::Full, BenchMethod::Dras],
        repetitions: 1,
        encoder: EncoderKind::RandomProjection,
        sampling: SamplingConfig::default(),
        seed: 2,
    }
}

#[test]
fn encoded_counters_are_exact() {
    let s = slides(&[(40, 30), (20, 20), (30, 30), (10, 10)], 4);
    let model = ModelParams::init(&ModelDims::standard(8, 16), 1).unwrap();
    let r = run_bench(&model, &s, &config(vec![1, 16])).unwrap();
    let sum_k: usize = s.iter().map(|x| x.coords().len()).sum();
    let sum_min: usize = s.iter().map(|x| x.coords().len().min(800)).sum();
    for b in [1, 16] {
        assert_eq!(r.cell(BenchMethod::Full, b).unwrap().patches_encoded, sum_k);
        assert_eq!(r.cell(BenchMethod::Dras, b).unwrap().patches_encoded, sum_min);
    }
}

#[test]
fn peak_bytes_follow_buffer_sizes() {
    let patch = 4;
    let s = slides(&[(40, 40), (35, 30)], patch);
    let model = ModelParams::init(&ModelDims::standard(8, 16), 1).unwrap();
    let r = run_bench(&model, &s, &config(vec![1, 8, 64])).unwrap();
    let patch_bytes = (patch * patch * 3) as usize;
    for b in [1, 8, 64] {
        let full = r.cell(BenchMethod::Full, b).unwrap();
        let dras = r.cell(BenchMethod::Dras, b).unwrap();
        assert!(full.peak_bytes >= b * patch_bytes);
        assert!(dras.peak_bytes >= b * patch_bytes);
        assert!(dras.peak_bytes <= full.peak_bytes, "batch {b}");
    }
    let small = r.cell(BenchMethod::Full, 1).unwrap().peak_bytes;
    let large = r.cell(BenchMethod::Full, 64).unwrap().peak_bytes;
    assert!(large > small);
}

#[test]
fn live_encoding_matches_cached_features() {
    let s = &slides(&[(12, 9)], 4)[0];
    let encoder = Encoder::new(EncoderKind::RandomProjection, 4, 6, 3).unwrap();
    let tracker = BufferTracker::default();
    let model = ModelParams::init(&ModelDims::standard(4, 6), 5).unwrap();
    let live_result = {
        let mut live = LiveFeatures::new(s, &encoder, 5, &tracker).unwrap();
        run_full(&model, &mut live).unwrap()
    };
    assert_eq!(tracker.current(), 0);

    let mut features = Matrix::zeros(0, 6);
    let mut px = vec![0u8; s.patch_bytes()];
    let mut row = vec![0.0; 6];
    for i in 0..s.coords().len() {
        s.fill_patch(i, &mut px);
        encoder.encode(&px, &mut row).unwrap();
        features.push_row(&row).unwrap();
    }
    let bag = Bag::new("b0", "p", 0, s.coords().to_vec(), features).unwrap();
    let cached = run_full(&model, &mut CachedFeatures(&bag)).unwrap();
    assert_eq!(live_result.logits, cached.logits);
}

#[test]
fn mismatched_encoder_is_rejected() {
    let s = &slides(&[(5, 5)], 4)[0];
    let encoder = Encoder::new(EncoderKind::RandomProjection, 8, 6, 3).unwrap();
    let tracker = BufferTracker::default();
    assert!(LiveFeatures::new(s, &encoder, 4, &tracker).is_err());
    assert!(LiveFeatures::new(s, &Encoder::new(EncoderKind::RandomProjection, 4, 6, 3).unwrap(), 0, &tracker).is_err());
}

#[test]
fn empty_method_list_renders_an_empty_table() {
    let s = slides(&[(5, 5)], 4);
    let model = ModelParams::init(&ModelDims::standard(4, 8), 1).unwrap();
    let r = run_bench(&model, &s, &BenchConfig { methods: vec![], ..config(vec![1]) }).unwrap();
    assert!(r.cells.is_empty());
    assert_eq!(render_table(&r).lines().count(), 1);
}

#[test]
fn single_cell_renders_one_row_and_round_trips() {
    let s = slides(&[(10, 10)], 4);
    let model = ModelParams::init(&ModelDims::standard(4, 8), 1).unwrap();
    let r = run_bench(
        &model,
        &s,
        &BenchConfig {
            methods: vec![BenchMethod::Dras],
            ..config(vec![4])
        },
    )
    .unwrap();
    assert_eq!(r.cells.len(), 1);
    assert_eq!(render_table(&r).lines().count(), 2);
    let csv = render_csv(&r).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "method,batch_size,total_seconds,mean_seconds_per_bag,peak_bytes,patches_encoded"
    );
    assert_eq!(parse_csv(&csv).unwrap(), r);
    assert_eq!(parse_csv(&render_csv(&BenchReport::default()).unwrap()).unwrap(), BenchReport::default());
}

proptest! {
    #[test]
    fn median_of_three_ignores_order(a in -1e3f64..1e3, b in -1e3f64..1e3, c in -1e3f64..1e3) {
        let m = median(&[a, b, c]);
        for p in [[a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
            prop_assert_eq!(median(&p), m);
        }
        prop_assert!(m >= a.min(b).min(c) && m <= a.max(b).max(c));
    }
}
