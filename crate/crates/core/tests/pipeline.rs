use proptest::prelude::*;
use rewind_core::assembly::{assemble, LLMInputSequence};
use rewind_core::dfs::{
    dfs_select, dpc_knn_select, frame_relevance, select_top_l, CandidateSet, DfsParams, SelectionResult,
};
use rewind_core::perceiver::process_stream;
use rewind_core::pipeline::{run_pipeline, PipelineOptions};
use rewind_core::stream::{encode_instruction, load_stream, save_stream, synth_stream};
use rewind_core::verify::{dpc_oracle, monolithic_dfs};
use rewind_core::{FeatureBuffer, InstructionEncoding, Matrix, MemoryBank, ModelParams, RunConfig, ZRepr};

fn cfg() -> RunConfig {
    RunConfig {
        dim: 16,
        heads: 2,
        layers: 2,
        n_read: 8,
        subclip_frames: 8,
        top_l: 12,
        centers: 4,
        pool_tokens: 3,
        ..RunConfig::default()
    }
}

#[test]
fn dfs_matches_monolithic_reference_on_32_frames() {
    for (seed, repr) in [(1, ZRepr::Mean), (2, ZRepr::Concat), (3, ZRepr::Mean)] {
        let cfg = RunConfig {
            seed,
            z_repr: repr,
            ..cfg()
        };
        let model = ModelParams::init(&cfg);
        let stream = synth_stream(seed, 32, 7, cfg.dim).unwrap();
        let instr = encode_instruction("the bird lands on the branch", cfg.dim).unwrap();
        let (bank, buffer, _) = process_stream(&stream, &instr, &model, cfg.subclip_frames, true).unwrap();
        let params = DfsParams::from(&cfg);
        let got = dfs_select(&bank, &buffer, &instr, params).unwrap();
        let (centers, pooled) = monolithic_dfs(&bank, &buffer, &instr, params).unwrap();
        assert_eq!(got.centers, centers);
        for (a, b) in got.pooled.iter().zip(&pooled) {
            assert!(a.max_abs_diff(b) <= 1e-12);
        }
    }
}

#[test]
fn single_frame_bank_selects_that_frame() {
    let cfg = cfg();
    let model = ModelParams::init(&cfg);
    let stream = synth_stream(4, 1, 5, cfg.dim).unwrap();
    let instr = encode_instruction("anything", cfg.dim).unwrap();
    let (bank, buffer, _) = process_stream(&stream, &instr, &model, 8, true).unwrap();
    let sel = dfs_select(&bank, &buffer, &instr, DfsParams::from(&cfg)).unwrap();
    assert_eq!(sel.centers, vec![0]);
    let raw = buffer.retrieve(0).unwrap();
    assert_eq!(sel.pooled[0], rewind_core::dfs::pool_tokens(&raw, 3).unwrap());
}

#[test]
fn every_format_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cfg();
    let stream = synth_stream(5, 20, 6, cfg.dim).unwrap();
    let out = run_pipeline(&cfg, &stream, "a man walks in", dir.path(), &PipelineOptions::default()).unwrap();

    let path = dir.path().join("s.rwfs");
    save_stream(&stream, &path).unwrap();
    let back = load_stream(&path).unwrap();
    assert_eq!(back, stream);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());

    let bank_bytes = std::fs::read(dir.path().join("memory.rwmb")).unwrap();
    let bank = MemoryBank::from_bytes(&bank_bytes).unwrap();
    assert_eq!(bank, out.bank);
    assert_eq!(bank.to_bytes().unwrap(), bank_bytes);

    let pm = std::fs::read(dir.path().join("params.rwpm")).unwrap();
    let model = ModelParams::from_bytes(&pm, &cfg).unwrap();
    assert_eq!(model, out.model);
    assert_eq!(model.to_bytes().unwrap(), pm);

    let sl = std::fs::read(dir.path().join("selection.rwsl")).unwrap();
    let sel = SelectionResult::from_bytes(&sl).unwrap();
    assert_eq!(sel.centers, out.selection.centers);
    assert_eq!(sel.pooled, out.selection.pooled);
    assert_eq!(sel.to_bytes(cfg.dim).unwrap(), sl);

    let li = std::fs::read(dir.path().join("llm_input.rwli")).unwrap();
    let seq = LLMInputSequence::from_bytes(&li).unwrap();
    assert_eq!(seq, out.sequence);
    assert_eq!(seq.memory_rows(), 40);
    assert_eq!(seq.selected_rows(), 12);
    assert_eq!(seq.to_bytes().unwrap(), li);

    let buffer = FeatureBuffer::open_manifest(dir.path().join("buffer.manifest")).unwrap();
    for f in 0..20 {
        assert_eq!(&buffer.retrieve(f).unwrap(), stream.frame(f as usize));
    }
}

#[test]
fn zero_embedding_words_keep_relevance_ranking() {
    let cfg = cfg();
    let model = ModelParams::init(&cfg);
    let stream = synth_stream(6, 24, 4, cfg.dim).unwrap();
    let instr = encode_instruction("red ball rolls", cfg.dim).unwrap();
    let (bank, _, _) = process_stream(&stream, &instr, &model, 8, true).unwrap();
    let mut padded = instr.tokens().data().to_vec();
    padded.extend(std::iter::repeat_n(0.0, 2 * cfg.dim));
    let padded = InstructionEncoding::from_tokens(Matrix::new(5, cfg.dim, padded).unwrap()).unwrap();
    let a = select_top_l(&bank, &frame_relevance(&bank, instr.mean()).unwrap(), 10, ZRepr::Mean).unwrap();
    let b = select_top_l(&bank, &frame_relevance(&bank, padded.mean()).unwrap(), 10, ZRepr::Mean).unwrap();
    assert_eq!(a.frame_indices, b.frame_indices);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sequence_length_identity(
        seed in 0u64..1000,
        frames in 1usize..40,
        n_write in 1usize..4,
        centers in 1usize..6,
        top_l in 1usize..10,
        pool in 1usize..5,
    ) {
        let cfg = RunConfig { seed, n_write, centers, top_l, pool_tokens: pool, ..cfg() };
        let model = ModelParams::init(&cfg);
        let stream = synth_stream(seed, frames, 5, cfg.dim).unwrap();
        let instr = encode_instruction("look closely", cfg.dim).unwrap();
        let (bank, buffer, _) = process_stream(&stream, &instr, &model, cfg.subclip_frames, true).unwrap();
        let sel = dfs_select(&bank, &buffer, &instr, DfsParams::from(&cfg)).unwrap();
        let seq = assemble(&bank, &sel, &model.separator).unwrap();
        let chosen = centers.min(top_l).min(frames);
        prop_assert_eq!(seq.len(), n_write * frames + 1 + chosen * pool);
        prop_assert_eq!(sel.centers.len(), chosen);
        prop_assert!(sel.centers.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn scaled_candidates_stay_deterministic_and_match_oracle(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let inst = rewind_core::verify::random_dpc_instance(seed);
        let scaled: Vec<Vec<f64>> = inst.points.iter().map(|p| p.iter().map(|v| v * scale).collect()).collect();
        let set = CandidateSet {
            frame_indices: inst.frames.clone(),
            relevance: vec![0.0; inst.frames.len()],
            points: scaled.clone(),
            target: inst.frames.len(),
        };
        let a = dpc_knn_select(&set, inst.knn_k, inst.centers).unwrap();
        let b = dpc_knn_select(&set, inst.knn_k, inst.centers).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.centers, dpc_oracle(&scaled, &inst.frames, inst.knn_k, inst.centers).centers);
    }

    #[test]
    fn max_density_candidates_take_far_branch(seed in any::<u64>()) {
        let inst = rewind_core::verify::random_dpc_instance(seed);
        prop_assume!(inst.points.len() >= 2);
        let sigma = rewind_core::dfs::local_density(&inst.points, inst.knn_k).unwrap();
        let rho = rewind_core::dfs::distance_index(&inst.points, &sigma).unwrap();
        let top = sigma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for l in 0..sigma.len() {
            let far = inst.points.iter().map(|z| z.iter().zip(&inst.points[l]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).fold(0.0, f64::max);
            if sigma[l] == top {
                prop_assert_eq!(rho[l], far);
            }
            prop_assert!(sigma[l] > 0.0 && sigma[l] <= 1.0);
        }
    }
}
