use cafbifpn_core::config::RunConfig;
use cafbifpn_core::error::Error;
use cafbifpn_core::fixture::{backbone_fixture, read_backbone, write_fixture, FIXTURE_DIMS, MANIFEST};
use cafbifpn_core::format::{tensor_read, tensor_write};
use cafbifpn_core::pyramid::{c_afbifpn_forward, InitOptions, PipelineParams};
use cafbifpn_core::tensor::{DType, Tensor};
use cafbifpn_core::RngState;
use tempfile::TempDir;

#[test]
fn fixture_directory_round_trips() {
    let tmp = TempDir::new().unwrap();
    let manifest = write_fixture(9, tmp.path()).unwrap();
    assert_eq!(manifest.tensors.len(), 4);
    assert!(tmp.path().join(MANIFEST).exists());
    let read = read_backbone(tmp.path()).unwrap();
    let direct = backbone_fixture(9).unwrap();
    for (l, (a, b)) in read.levels.iter().zip(&direct.levels).enumerate() {
        assert!(a.bit_eq(b));
        assert_eq!(a.dims(), FIXTURE_DIMS[l]);
    }
}

#[test]
fn fixture_without_manifest_uses_default_names() {
    let tmp = TempDir::new().unwrap();
    write_fixture(2, tmp.path()).unwrap();
    std::fs::remove_file(tmp.path().join(MANIFEST)).unwrap();
    assert!(read_backbone(tmp.path()).unwrap().levels[3].bit_eq(&backbone_fixture(2).unwrap().levels[3]));
}

#[test]
fn missing_level_names_the_node() {
    let tmp = TempDir::new().unwrap();
    write_fixture(2, tmp.path()).unwrap();
    std::fs::remove_file(tmp.path().join("C5.tnsr")).unwrap();
    match read_backbone(tmp.path()) {
        Err(Error::Pipeline { node, .. }) => assert_eq!(node, "C5"),
        other => panic!("expected pipeline error, got {other:?}"),
    }
}

#[test]
fn tensor_files_keep_dtype_and_bits() {
    let tmp = TempDir::new().unwrap();
    let mut rng = RngState::new(4);
    let t = Tensor::uniform(&[3, 2, 5], &mut rng, -10.0, 10.0).unwrap();
    for dtype in [DType::F64, DType::F32] {
        let path = tmp.path().join("t.tnsr");
        let src = t.to_dtype(dtype);
        tensor_write(&path, &src).unwrap();
        let back = tensor_read(&path).unwrap();
        assert_eq!(back.dtype(), dtype);
        assert!(back.bit_eq(&src));
    }
}

#[test]
fn forward_on_files_equals_forward_in_memory() {
    let tmp = TempDir::new().unwrap();
    write_fixture(3, tmp.path()).unwrap();
    let cfg = RunConfig::default();
    let params = PipelineParams::seeded(&cfg, [16, 32, 64, 128], InitOptions::default()).unwrap();
    let from_disk = c_afbifpn_forward(&read_backbone(tmp.path()).unwrap(), &params).unwrap();
    let in_memory = c_afbifpn_forward(&backbone_fixture(3).unwrap(), &params).unwrap();
    for (a, b) in from_disk.outputs.levels.iter().zip(&in_memory.outputs.levels) {
        assert!(a.bit_eq(b));
    }
}
