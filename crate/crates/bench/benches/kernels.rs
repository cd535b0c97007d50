use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cosh_core::align::{align_sequence, project_point, AlignConfig, AlignmentProblem, CameraIntrinsics, HandTranslation};
use cosh_core::audio::synth_audio_features;
use cosh_core::diffusion::{build_schedule, posterior, TokenSequence};
use cosh_core::dit_a::{denoiser_forward, DenoiserConfig, DitA};
use cosh_core::synth::synth_gesture_dataset;
use cosh_core::tensor::forward_attention;
use cosh_core::video::{predict_noise, DitV, VideoConditions, VideoConfig};
use cosh_core::vq::{VqConfig, VqModel};
use cosh_core::Tensor;

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (q, k, v) = (
        Tensor::randn(&[112, 128], 1.0, &mut rng),
        Tensor::randn(&[128, 128], 1.0, &mut rng),
        Tensor::randn(&[128, 128], 1.0, &mut rng),
    );
    c.bench_function("attention 112x128 over 128 keys", |b| {
        b.iter(|| forward_attention(black_box(&q), &k, &v).unwrap())
    });
}

fn diffusion(c: &mut Criterion) {
    c.bench_function("build schedule T=100 K=128", |b| b.iter(|| build_schedule(black_box(100), 128, 1.0).unwrap()));
    let s = build_schedule(100, 128, 1.0).unwrap();
    c.bench_function("posterior K=128", |b| b.iter(|| posterior(black_box(128), 5, 50, &s).unwrap()));
}

fn alignment(c: &mut Criterion) {
    let cam = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0).unwrap();
    let j3: Vec<[f64; 3]> = (0..21).map(|i| [0.004 * i as f64 - 0.04, 0.003 * (i % 7) as f64, 0.001 * (i % 3) as f64]).collect();
    let frames: Vec<HandTranslation> = (0..10).map(|f| HandTranslation::new(0.01 * f as f64, 0.0, 0.8)).collect();
    let j2 = frames.iter().map(|t| j3.iter().map(|p| project_point(*p, t, &cam).unwrap()).collect()).collect();
    let p = AlignmentProblem { joints_3d: vec![j3; 10], joints_2d: j2, intrinsics: cam, lambda_tr: 10.0 };
    c.bench_function("align 10 frames x 21 joints", |b| b.iter(|| align_sequence(black_box(&p), &AlignConfig::default()).unwrap()));
}

fn models(c: &mut Criterion) {
    let vq = VqModel::new(VqConfig::default(), 0).unwrap();
    let clip = synth_gesture_dataset(0, 1, 128).unwrap().remove(0).clip;
    c.bench_function("vq tokenize 128 frames", |b| b.iter(|| vq.tokenize(black_box(&clip)).unwrap()));

    let dit = DitA::new(DenoiserConfig::desk(), 0).unwrap();
    let audio = synth_audio_features(0, 128, 4, 32).unwrap();
    let tokens = TokenSequence::all_mask(16, 128);
    c.bench_function("motion denoiser forward (desk)", |b| {
        b.iter(|| denoiser_forward(&dit, black_box(&tokens), &audio, 50).unwrap())
    });

    let model = DitV::new(VideoConfig::desk(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cond = VideoConditions {
        poses: Tensor::zeros(&[25, 64, 64, 3]),
        reference_latent: Tensor::randn(&[1, 8, 8, 4], 1.0, &mut rng),
        reference_pose: Tensor::zeros(&[1, 64, 64, 3]),
        previous_latent: Some(Tensor::randn(&[2, 8, 8, 4], 1.0, &mut rng)),
    };
    let x = Tensor::randn(&[7, 8, 8, 4], 1.0, &mut rng);
    let mut group = c.benchmark_group("video");
    group.sample_size(10);
    group.bench_function("video denoiser forward (desk)", |b| b.iter(|| predict_noise(&model, black_box(&x), &cond, 500).unwrap()));
    group.finish();
}

criterion_group!(benches, attention, diffusion, alignment, models);
criterion_main!(benches);
