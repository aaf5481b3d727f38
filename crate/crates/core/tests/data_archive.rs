use std::collections::BTreeMap;
use std::fs;

use flexitok::data::{
    convert_field_arrays, gen_advection_trajectory, read_archive, write_archive, DatasetMeta, FieldRank, FieldSchema,
    FieldSpec, Trajectory,
};
use flexitok::error::Error;
use flexitok::tensor::Tensor;

fn sample(n: usize) -> Vec<Trajectory<f32>> {
    (0..n).map(|i| gen_advection_trajectory::<f32>((8, 8), (1, i as i64 % 3), 5 + i, i as u64).unwrap()).collect()
}

#[test]
fn write_then_read_is_bit_identical_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.fxta");
    let trajs = sample(4);
    let meta = DatasetMeta { name: "adv".into(), grid: (8, 8), trajectory_len: 5, tags: BTreeMap::new() };
    write_archive(&path, &FieldSchema::advection(), Some(&meta), &trajs).unwrap();
    let r = read_archive(&path, Some(&FieldSchema::advection())).unwrap();
    assert_eq!(r.len(), 4);
    assert_eq!(r.meta.as_ref(), Some(&meta));
    for (i, t) in r.trajectories::<f32>().enumerate() {
        let t = t.unwrap();
        assert!(t.frames.bit_eq(&trajs[i].frames), "chunk {i}");
    }
}

#[test]
fn wrong_channel_count_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.fxta");
    write_archive(&path, &FieldSchema::advection(), None, &sample(1)).unwrap();
    let wanted = FieldSchema::new(vec![
        FieldSpec { name: "tracer".into(), rank: FieldRank::Scalar },
        FieldSpec { name: "velocity".into(), rank: FieldRank::Vector },
        FieldSpec { name: "pressure".into(), rank: FieldRank::Scalar },
    ])
    .unwrap();
    match read_archive(&path, Some(&wanted)) {
        Err(Error::SchemaMismatch { field, .. }) => assert_eq!(field, "pressure"),
        other => panic!("unexpected {:?}", other.map(|r| r.len())),
    }

    // Header claims the schema but the chunk carries fewer channels.
    let bad = Trajectory::new(FieldSchema::scalar("tracer"), Tensor::<f32>::zeros(&[3, 1, 8, 8])).unwrap();
    let path2 = dir.path().join("b.fxta");
    write_archive(&path2, &FieldSchema::scalar("tracer"), None, &[bad]).unwrap();
    let mut bytes = fs::read(&path2).unwrap();
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
    let patched = header.replace(
        r#"[{"name":"tracer","rank":"scalar"}]"#,
        r#"[{"name":"tracer","rank":"scalar"},{"name":"velocity","rank":"vector"}]"#,
    );
    assert_ne!(patched, header);
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
    out.extend_from_slice(patched.as_bytes());
    let shift = patched.len() as u64 - header_len as u64;
    let rest = bytes.split_off(16 + header_len);
    // Fix index offsets for the longer header.
    let mut rest = rest;
    let n = rest.len();
    let idx_off = u64::from_le_bytes(rest[n - 12..n - 4].try_into().unwrap());
    let idx_local = (idx_off - 16 - header_len as u64) as usize;
    let count = u64::from_le_bytes(rest[idx_local..idx_local + 8].try_into().unwrap()) as usize;
    for c in 0..count {
        let p = idx_local + 8 + c * 24;
        let off = u64::from_le_bytes(rest[p..p + 8].try_into().unwrap()) + shift;
        rest[p..p + 8].copy_from_slice(&off.to_le_bytes());
    }
    rest[n - 12..n - 4].copy_from_slice(&(idx_off + shift).to_le_bytes());
    out.extend_from_slice(&rest);
    fs::write(&path2, out).unwrap();
    match read_archive(&path2, None) {
        Err(Error::SchemaMismatch { field, detail }) => {
            assert_eq!(field, "velocity", "{detail}");
        }
        other => panic!("unexpected {:?}", other.map(|r| r.len())),
    }
}

#[test]
fn corrupt_header_and_truncated_chunk_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.fxta");
    write_archive(&path, &FieldSchema::advection(), None, &sample(2)).unwrap();
    let good = fs::read(&path).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'Z';
    fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(read_archive(&path, None), Err(Error::CorruptHeader(_))));

    let mut bad_json = good.clone();
    bad_json[16] = b'#';
    fs::write(&path, &bad_json).unwrap();
    assert!(matches!(read_archive(&path, None), Err(Error::CorruptHeader(_))));

    // Point the second chunk past the data region.
    let mut truncated = good.clone();
    let n = truncated.len();
    let idx_off = u64::from_le_bytes(truncated[n - 12..n - 4].try_into().unwrap()) as usize;
    let p = idx_off + 8 + 24;
    let off = u64::from_le_bytes(truncated[p..p + 8].try_into().unwrap()) + 64;
    truncated[p..p + 8].copy_from_slice(&off.to_le_bytes());
    fs::write(&path, &truncated).unwrap();
    match read_archive(&path, None) {
        Err(Error::TruncatedChunk { index, .. }) => assert_eq!(index, 1),
        other => panic!("unexpected {:?}", other.map(|r| r.len())),
    }

    // Cut the file short: the trailer is gone.
    fs::write(&path, &good[..good.len() - 40]).unwrap();
    assert!(matches!(read_archive(&path, None), Err(Error::CorruptHeader(_))));
}

#[test]
fn converter_assembles_channels_in_schema_order() {
    let schema = FieldSchema::advection();
    let tracer = Tensor::<f32>::from_fn(&[2, 4, 4], |i| i[0] as f32 + 0.1 * i[1] as f32);
    let vel = Tensor::<f32>::from_fn(&[2, 2, 4, 4], |i| 10.0 + i[1] as f32);
    let mut arrays = BTreeMap::new();
    arrays.insert("velocity".to_string(), vel);
    arrays.insert("tracer".to_string(), tracer);
    let t = convert_field_arrays(&schema, &arrays).unwrap();
    assert_eq!(t.frames.shape(), &[2, 3, 4, 4]);
    assert_eq!(t.frames.get(&[1, 0, 2, 0]), 1.2);
    assert_eq!(t.frames.get(&[0, 2, 0, 0]), 11.0);

    arrays.remove("velocity");
    assert!(matches!(convert_field_arrays(&schema, &arrays), Err(Error::SchemaMismatch { field, .. }) if field == "velocity"));
}
