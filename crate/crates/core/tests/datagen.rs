use proptest::prelude::*;
use sdcpc_core::datagen::{clip_seed, generate_clip, generate_dataset, read_clip, write_clip, ClipParams, Dataset};
use sdcpc_core::Error;

fn small() -> ClipParams {
    ClipParams {
        t: 8,
        size: 32,
        ..ClipParams::default()
    }
}

#[test]
fn same_seed_same_clip() {
    let a = generate_clip(9, &small()).unwrap();
    let b = generate_clip(9, &small()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.frames, generate_clip(10, &small()).unwrap().frames);
}

#[test]
fn clip_layout_and_label_range() {
    let p = small();
    let c = generate_clip(1, &p).unwrap();
    assert_eq!(c.frames.len(), 8 * 32 * 32 * 3);
    assert_eq!(c.labels.len(), 8 * 32 * 32);
    assert!(c.labels.iter().all(|&l| (l as usize) < p.cls));
    assert_eq!(c.frame(3).shape(), &[32, 32, 3]);
    assert!(c.frame(3).data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn shapes_move_between_frames() {
    let c = generate_clip(2, &ClipParams::default()).unwrap();
    assert_ne!(c.label_bytes(0), c.label_bytes(10));
    assert!(c.label_bytes(0).iter().any(|&l| l > 0));
}

#[test]
fn occluded_clips_lose_and_regain_a_class() {
    let p = ClipParams {
        occlusion_prob: 1.0,
        ..ClipParams::default()
    };
    let mut with_drop = 0;
    for i in 0..20 {
        let c = generate_clip(clip_seed(7, i), &p).unwrap();
        let area = |t: usize, k: u8| c.label_bytes(t).iter().filter(|&&l| l == k).count();
        for k in 1..p.cls as u8 {
            let a: Vec<usize> = (0..p.t).map(|t| area(t, k)).collect();
            let first = a[0];
            if first > 0 && a.iter().any(|&x| 2 * x < first) {
                with_drop += 1;
                break;
            }
        }
    }
    assert!(with_drop > 0);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_clip(3, &small()).unwrap();
    let path = dir.path().join("c.sdc");
    write_clip(&c, &path).unwrap();
    assert_eq!(read_clip(&path).unwrap(), c);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 1);
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(read_clip(&path), Err(Error::Format(_))));
}

#[test]
fn dataset_on_disk_matches_in_memory() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(dir.path(), 5, 2, 44, &small()).unwrap();
    assert_eq!((m.clips.len(), m.train), (5, 3));
    let disk = Dataset::load(dir.path()).unwrap();
    let mem = Dataset::generate(5, 2, 44, &small()).unwrap();
    assert_eq!(disk.train, mem.train);
    assert_eq!(disk.val, mem.val);
    assert_eq!(disk.manifest, mem.manifest);
}

#[test]
fn invalid_parameters_are_rejected() {
    let odd = ClipParams { size: 30, ..small() };
    assert!(matches!(generate_clip(0, &odd), Err(Error::Config(_))));
    let short = ClipParams { t: 3, ..small() };
    assert!(matches!(generate_clip(0, &short), Err(Error::Config(_))));
    let dir = tempfile::tempdir().unwrap();
    assert!(generate_dataset(dir.path(), 2, 3, 0, &small()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_a_function_of_seed(seed in any::<u64>(), cls in 2usize..7) {
        let p = ClipParams { cls, ..small() };
        let a = generate_clip(seed, &p).unwrap();
        prop_assert_eq!(&a, &generate_clip(seed, &p).unwrap());
        prop_assert!(a.labels.iter().all(|&l| (l as usize) < cls));
    }
}
