//! Whole-pipeline integration checks at the default configuration.

use consist_core::maskex::ForegroundMask;
use consist_core::model::build_model;
use consist_core::sampler;
use consist_core::RunConfig;

fn default_run(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        identity_prompt: "a rainy alley | a street musician | playing guitar".into(),
        frame_prompts: vec!["a rainy alley | a street musician | packing up".into()],
        ..RunConfig::default()
    }
}

#[test]
fn no_pass_produces_non_finite_values_across_seeds() {
    let run = default_run(0);
    let model = build_model(&run.model).unwrap();
    let identity_prompt = run.prompt_layout(&run.identity_prompt).unwrap();
    let frame_prompt = run.prompt_layout(&run.frame_prompts[0]).unwrap();
    for seed in 0..20u64 {
        let identity =
            sampler::run_identity_pass(&model, &identity_prompt, seed, &run.sampler).unwrap();
        assert!(identity.latent.is_finite(), "identity latent, seed {seed}");
        let (m, mask) =
            sampler::run_probe_pass(&model, &frame_prompt, seed, &run.sampler, &identity.cache)
                .unwrap();
        let frame = sampler::run_frame_pass(
            &model,
            &frame_prompt,
            seed,
            &run.sampler,
            &identity.cache,
            &m,
            &mask,
        )
        .unwrap();
        assert!(frame.is_finite(), "frame latent, seed {seed}");
    }
}

#[test]
fn empty_frame_foreground_degrades_to_native_attention() {
    // with no foreground tokens and no background sharing there is nothing
    // to append or merge, so the frame pass must reproduce plain sampling
    let mut run = default_run(3);
    run.sampler.keep_background = false;
    let model = build_model(&run.model).unwrap();
    let prompt = run.prompt_layout(&run.identity_prompt).unwrap();
    let identity = sampler::run_identity_pass(&model, &prompt, run.seed, &run.sampler).unwrap();
    let (m, _) =
        sampler::run_probe_pass(&model, &prompt, run.seed, &run.sampler, &identity.cache).unwrap();
    let empty_mask = ForegroundMask::all_zeros(run.model.grid_h, run.model.grid_w);
    let frame = sampler::run_frame_pass(
        &model,
        &prompt,
        run.seed,
        &run.sampler,
        &identity.cache,
        &m,
        &empty_mask,
    )
    .unwrap();
    let (plain, _) = sampler::euler_sample(&model, &prompt, run.seed, &run.sampler, None).unwrap();
    assert!(frame.bits_eq(&plain));
}
