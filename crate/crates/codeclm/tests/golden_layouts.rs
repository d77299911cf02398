//! Frozen layout fixtures for a worked scenario small enough to derive by
//! hand: alphabet 8, two frames per symbol, two speakers, four codebook
//! streams over a 64-token vocabulary (pad 64, mask 65, end 66). The
//! utterance is [3, 1, 4, 1, 5] spoken by speaker 1, split as prefix
//! [3, 1], middle [4], suffix [1, 5]. Each fixture file was written out
//! by hand from the layout rules, token by token, so a byte-level match
//! checks the builders against an independent derivation rather than
//! against their own output.

use codeclm::align::{slice, SegmentSplit};
use codeclm::codec::{CodebookGrid, CodecSpec};
use codeclm::layout::{
    build_edit_inference, build_training_sequence, build_tts_inference, SpeakerInput, TtsVariant,
};
use codeclm::toy::{encode, ToyLanguageSpec};

fn scenario() -> ([Vec<u32>; 3], [CodebookGrid; 3]) {
    let spec = CodecSpec::new(4, 64, 50).unwrap();
    let toy = ToyLanguageSpec::new(8, 2, 2, spec).unwrap();
    let utt = encode(&toy, &[3, 1, 4, 1, 5], 1).unwrap();
    let split = SegmentSplit::from_cuts(2, 3, 5).unwrap();
    slice(&utt, &split).unwrap()
}

#[test]
fn training_layout_matches_frozen_fixture() {
    let (texts, grids) = scenario();
    let layout = build_training_sequence(&texts, &grids, 1).unwrap();
    layout.validate().unwrap();
    assert_eq!(layout.fixture_string(), include_str!("fixtures/training_layout.txt"));
}

#[test]
fn edit_inference_matches_frozen_fixture() {
    let (texts, grids) = scenario();
    let seq = build_edit_inference(&texts[0], &texts[2], &[7, 2], &grids[0], &grids[2], SpeakerInput::Id(1))
        .unwrap();
    assert_eq!(seq.fixture_string(), include_str!("fixtures/edit_inference.txt"));
}

#[test]
fn tts_middle_variant_matches_frozen_fixture() {
    let (texts, grids) = scenario();
    let seq = build_tts_inference(&texts[0], &[4, 1, 5], &grids[0], SpeakerInput::Id(1), TtsVariant::Middle)
        .unwrap();
    assert_eq!(seq.middle_prefill, 4);
    assert_eq!(seq.fixture_string(), include_str!("fixtures/tts_middle.txt"));
}

#[test]
fn tts_prefix_variant_matches_frozen_fixture() {
    let (texts, grids) = scenario();
    let seq = build_tts_inference(&texts[0], &[4, 1, 5], &grids[0], SpeakerInput::Id(1), TtsVariant::Prefix)
        .unwrap();
    assert_eq!(seq.fixture_string(), include_str!("fixtures/tts_prefix.txt"));
}

#[test]
fn tts_suffix_variant_matches_frozen_fixture() {
    let (texts, grids) = scenario();
    let speaker = SpeakerInput::Vector(vec![0.25, 0.75]);
    let seq = build_tts_inference(&texts[0], &[4, 1, 5], &grids[0], speaker, TtsVariant::Suffix).unwrap();
    assert_eq!(seq.fixture_string(), include_str!("fixtures/tts_suffix.txt"));
}
