use std::fs;

use pixmatch::data::{
    generate_pair_dataset, load_sample, read_image, read_label, render_sample, write_image, write_label, Dataset,
    Domain, DomainGap, Manifest, Scene, SceneSpec,
};
use pixmatch::image::{ImageTensor, LabelMap, IGNORE};
use pixmatch::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec() -> SceneSpec {
    SceneSpec {
        image_size: 32,
        ..SceneSpec::default()
    }
}

#[test]
fn class_frequencies_track_the_configured_proportions() {
    let spec = SceneSpec::default();
    let expected = spec.expected_class_fractions();
    let mut counts = vec![0usize; spec.num_classes];
    for i in 0..200 {
        let (_, _, label) = render_sample(&spec, &DomainGap::identity(), Domain::Source, i).unwrap();
        for (k, n) in label.histogram(spec.num_classes).into_iter().enumerate() {
            counts[k] += n;
        }
    }
    let total: usize = counts.iter().sum();
    for (k, (&n, &e)) in counts.iter().zip(&expected).enumerate() {
        let observed = n as f64 / total as f64;
        assert!(
            (observed - e).abs() <= 0.2 * e,
            "class {k}: observed {observed:.4}, expected {e:.4}"
        );
    }
}

#[test]
fn stored_labels_match_re_rasterized_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let (s, t) = generate_pair_dataset(&spec, &DomainGap::default(), 6, 6, dir.path()).unwrap();
    for (manifest, domain) in [(&s, Domain::Source), (&t, Domain::Target)] {
        for i in 0..manifest.len() {
            let (scene, _, _) = render_sample(&spec, &DomainGap::default(), domain, i).unwrap();
            let stored: Scene = serde_json::from_str(&serde_json::to_string(&scene).unwrap()).unwrap();
            let (_, label) = load_sample(manifest, i).unwrap();
            assert_eq!(stored.rasterize_labels(), label, "{domain:?} sample {i}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn target_transform_never_alters_labels(
        index in 0usize..1000,
        shift in -0.3f64..0.3,
        noise in 0.0f64..0.2,
        blur in 0.0f64..2.0,
        gamma in 0.5f64..2.0,
    ) {
        let spec = small_spec();
        let gap = DomainGap {
            palette_shift: vec![[shift, -shift, shift / 2.0]; spec.num_classes],
            noise_sigma: noise,
            blur_sigma: blur,
            gamma,
        };
        let (scene, image, label) = render_sample(&spec, &gap, Domain::Target, index).unwrap();
        let (_, _, plain) = render_sample(&spec, &DomainGap::identity(), Domain::Target, index).unwrap();
        prop_assert_eq!(&label, &plain);
        prop_assert_eq!(&label, &scene.rasterize_labels());
        prop_assert!(image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn png_round_trip(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImageTensor::new(h, w, (0..3 * h * w).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap();
        let lbl = LabelMap::new(h, w, (0..h * w).map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..5) }).collect()).unwrap();
        let (ip, lp) = (dir.path().join("a/img.png"), dir.path().join("b/lbl.png"));
        write_image(&ip, &img).unwrap();
        write_label(&lp, &lbl).unwrap();
        let back = read_image(&ip).unwrap();
        prop_assert_eq!(back.dims(), (h, w));
        for (a, b) in back.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        prop_assert_eq!(read_label(&lp).unwrap(), lbl);
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = small_spec();
    let (sa, ta) = generate_pair_dataset(&spec, &DomainGap::default(), 4, 5, a.path()).unwrap();
    generate_pair_dataset(&spec, &DomainGap::default(), 4, 5, b.path()).unwrap();
    for m in [&sa, &ta] {
        for (img, lbl) in &m.entries {
            for rel in [img, lbl] {
                assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
            }
        }
    }
    for name in ["source.manifest", "target.manifest"] {
        let text = |d: &std::path::Path| fs::read_to_string(d.join(name)).unwrap();
        assert_eq!(text(a.path()), text(b.path()));
    }
}

#[test]
fn manifests_reload_with_their_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let (s, t) = generate_pair_dataset(&spec, &DomainGap::default(), 3, 2, dir.path()).unwrap();
    let s2 = Manifest::load(&dir.path().join("source.manifest")).unwrap();
    let t2 = Manifest::load(&dir.path().join("target.manifest")).unwrap();
    assert_eq!((s2.len(), t2.len()), (3, 2));
    assert_eq!(s2.entries, s.entries);
    assert_eq!(t2.gap_digest, t.gap_digest);
    assert_ne!(s2.gap_digest, t2.gap_digest);
    assert_eq!(s2.scene_digest, t2.scene_digest);
    let data = Dataset::load(&t2).unwrap();
    assert_eq!((data.len(), data.num_classes), (2, 5));
}

#[test]
fn loader_errors() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    assert!(matches!(
        generate_pair_dataset(&spec, &DomainGap::default(), 0, 3, dir.path()),
        Err(Error::Config(_))
    ));
    let (mut s, _) = generate_pair_dataset(&spec, &DomainGap::default(), 2, 1, dir.path()).unwrap();
    assert!(matches!(load_sample(&s, 2), Err(Error::Index { index: 2, len: 2 })));

    // A label holding class C+1 fails validation and names the file.
    let bad = dir.path().join("bad_label.png");
    write_label(&bad, &LabelMap::filled(32, 32, spec.num_classes as u8 + 1)).unwrap();
    s.entries[1].1 = "bad_label.png".into();
    let msg = load_sample(&s, 1).unwrap_err().to_string();
    assert!(msg.contains("bad_label.png"), "{msg}");
    assert!(Dataset::load(&s).is_err());

    let corrupt = dir.path().join("corrupt.png");
    fs::write(&corrupt, b"not a png").unwrap();
    s.entries[0].0 = "corrupt.png".into();
    let msg = load_sample(&s, 0).unwrap_err().to_string();
    assert!(msg.contains("corrupt.png"), "{msg}");

    s.entries.clear();
    assert!(Dataset::load(&s).is_err());
}
