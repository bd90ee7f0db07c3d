use lidog::cloud::{ClassVocabulary, LabelRemap};

#[test]
fn semantic_kitti_remap_loads() {
    let text = include_str!("../../../configs/remap/semantic_kitti.toml");
    let vocab = ClassVocabulary::default();
    let remap = LabelRemap::from_toml(text, &vocab).unwrap();
    let name = |raw| vocab.name(remap.resolve(raw)).to_string();
    assert_eq!(name(40), "road");
    assert_eq!(name(252), "vehicle");
    assert_eq!(name(72), "terrain");
    assert_eq!(name(0), "ignore");
    assert_eq!(name(12345), "ignore");
}
