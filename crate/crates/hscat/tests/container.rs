//! Container format: roundtrips, corruption detection, version gating.

use hscat::container::{crc32, Container, ContainerWriter, Role};
use hscat::error::HscatError;
use hscat_core::tensor::DenseGrid;

fn sample_writer() -> ContainerWriter {
    let mut w = ContainerWriter::new(serde_json::json!({"scale": 44.0, "note": "test"}));
    let grid = DenseGrid::from_fn([3, 4, 5], |x, y, z| (x * 20 + y * 5 + z) as f64 * 0.25 - 3.0);
    w.add_grid("sigma", Role::Sigma, &grid);
    w.add_f32("quarter", Role::Param, &[2, 2], &[1.0, -0.5, 3.25, 0.0]);
    w.add_f64("scalar", Role::Param, &[1], &[42.0]);
    w
}

#[test]
fn roundtrip_is_bit_exact() {
    let bytes = sample_writer().to_bytes().unwrap();
    let c = Container::from_bytes(&bytes).unwrap();
    assert_eq!((c.major, c.minor), (1, 0));

    let grid = c.grid("sigma").unwrap();
    assert_eq!(grid.shape, [3, 4, 5]);
    let expect = DenseGrid::from_fn([3, 4, 5], |x, y, z| (x * 20 + y * 5 + z) as f64 * 0.25 - 3.0);
    for (a, b) in grid.data.iter().zip(&expect.data) {
        // Grid sections are stored as f32; the chosen values survive the
        // narrowing exactly.
        assert_eq!(a.to_bits(), b.to_bits());
    }

    assert_eq!(c.values(c.section("quarter").unwrap()), [1.0, -0.5, 3.25, 0.0]);
    assert_eq!(c.values(c.section("scalar").unwrap()), [42.0]);
    assert_eq!(c.meta()["scale"], 44.0);

    // Re-encoding the decoded content must reproduce identical bytes: the
    // format has a single canonical serialization.
    let mut w2 = ContainerWriter::new(c.meta().clone());
    w2.add_grid("sigma", Role::Sigma, &c.grid("sigma").unwrap());
    w2.add_f32("quarter", Role::Param, &[2, 2], &c.values(c.section("quarter").unwrap()));
    w2.add_f64("scalar", Role::Param, &[1], &c.values(c.section("scalar").unwrap()));
    assert_eq!(w2.to_bytes().unwrap(), bytes);
}

#[test]
fn file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.hsct");
    sample_writer().write_to(&path).unwrap();
    let c = Container::read_from(&path).unwrap();
    assert_eq!(c.grid("sigma").unwrap().shape, [3, 4, 5]);
}

#[test]
fn corrupt_payload_byte_is_detected() {
    let mut bytes = sample_writer().to_bytes().unwrap();
    // Flip one bit in the middle of the payload (well past the header).
    let idx = bytes.len() - 12;
    bytes[idx] ^= 0x40;
    match Container::from_bytes(&bytes) {
        Err(HscatError::Checksum { stored, computed }) => assert_ne!(stored, computed),
        other => panic!("expected checksum error, got {other:?}"),
    }
}

#[test]
fn truncated_input_is_rejected() {
    let bytes = sample_writer().to_bytes().unwrap();
    for cut in [0, 3, 7, 11, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            Container::from_bytes(&bytes[..cut]).is_err(),
            "truncation at {cut} must fail"
        );
    }
}

#[test]
fn bad_magic_is_rejected() {
    let mut bytes = sample_writer().to_bytes().unwrap();
    bytes[0] = b'X';
    assert!(matches!(
        Container::from_bytes(&bytes),
        Err(HscatError::Format(_))
    ));
}

#[test]
fn newer_minor_is_accepted_newer_major_is_rejected() {
    let bytes = sample_writer().to_bytes().unwrap();

    // Bump the minor: readers must stay compatible.
    let mut minor = bytes.clone();
    let word = (1u32 << 16) | 7;
    minor[4..8].copy_from_slice(&word.to_le_bytes());
    let c = Container::from_bytes(&minor).unwrap();
    assert_eq!((c.major, c.minor), (1, 7));
    assert_eq!(c.values(c.section("scalar").unwrap()), [42.0]);

    // Bump the major: layout guarantees are gone, reject.
    let mut major = bytes;
    let word = 2u32 << 16;
    major[4..8].copy_from_slice(&word.to_le_bytes());
    match Container::from_bytes(&major) {
        Err(HscatError::Version { major: m, .. }) => assert_eq!(m, 2),
        other => panic!("expected version error, got {other:?}"),
    }
}

#[test]
fn missing_section_and_non_grid_shape_error() {
    let bytes = sample_writer().to_bytes().unwrap();
    let c = Container::from_bytes(&bytes).unwrap();
    assert!(c.section("nope").is_err());
    assert!(c.grid("quarter").is_err(), "2-D section is not a volume");
}

#[test]
fn crc_matches_reference_vectors() {
    // IEEE polynomial, reflected; standard check value plus the empty input.
    assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    assert_eq!(crc32(b""), 0);
}
