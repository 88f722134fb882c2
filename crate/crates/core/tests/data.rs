use std::fs;
use std::path::Path;

use mvcons::data::{generate_synthetic, load_image_folder, SynthSpec, MANIFEST};
use mvcons::Error;

fn encode_rgb(path: &Path, w: u32, h: u32, bytes: &[u8]) {
    let file = fs::File::create(path).unwrap();
    let mut enc = png::Encoder::new(file, w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header().unwrap().write_image_data(bytes).unwrap();
}

#[test]
fn known_png_bytes_load_as_scaled_values() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("d/only")).unwrap();
    let bytes = [0u8, 51, 102, 153, 204, 255, 255, 0, 0, 10, 20, 30];
    encode_rgb(&dir.path().join("d/only/a.png"), 2, 2, &bytes);
    let split = load_image_folder(&dir.path().join("d"), 2).unwrap();
    let img = &split.samples[0].image;
    // pixel (0,0) is the first RGB triple, stored row-major
    assert_eq!(img.get(0, 0), [0.0, 0.2, 0.4]);
    assert_eq!(img.get(1, 0), [0.6, 0.8, 1.0]);
    assert_eq!(img.get(0, 1), [1.0, 0.0, 0.0]);
    assert_eq!(img.get(1, 1), [10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
}

#[test]
fn classes_follow_sorted_directory_names() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("dom");
    for (class, files) in [("zebra", 2), ("Apple", 1), ("mango", 3)] {
        fs::create_dir_all(root.join(class)).unwrap();
        for k in (0..files).rev() {
            encode_rgb(&root.join(class).join(format!("{k}.png")), 1, 1, &[k as u8, 0, 0]);
        }
    }
    fs::write(root.join("mango/notes.txt"), "ignored").unwrap();
    let split = load_image_folder(&root, 1).unwrap();
    assert_eq!(split.classes, ["Apple", "mango", "zebra"]);
    assert_eq!(split.domain, "dom");
    let ids: Vec<(&str, usize)> = split.samples.iter().map(|s| (s.id.as_str(), s.label.unwrap())).collect();
    assert_eq!(
        ids,
        [("Apple/0.png", 0), ("mango/0.png", 1), ("mango/1.png", 1), ("mango/2.png", 1), ("zebra/0.png", 2), ("zebra/1.png", 2)]
    );
}

#[test]
fn missing_directory_error_names_the_path() {
    let err = load_image_folder(Path::new("/no/such/split"), 8).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/no/such/split"), "{err}");
}

#[test]
fn generator_is_reproducible_and_writes_a_manifest() {
    let spec = SynthSpec {
        num_classes: 3,
        per_class: 2,
        image_size: 16,
        seed: 4,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (src, tgt) = generate_synthetic(&spec, a.path()).unwrap();
    generate_synthetic(&spec, b.path()).unwrap();
    assert_eq!((src.len(), tgt.len()), (6, 6));
    assert_eq!(src.classes, tgt.classes);
    let first = format!("source/{}", src.samples[0].id);
    let last = format!("target/{}", tgt.samples[5].id);
    for rel in [first.as_str(), last.as_str(), MANIFEST] {
        let (x, y) = (a.path().join(rel), b.path().join(rel));
        assert_eq!(fs::read(&x).unwrap_or_else(|e| panic!("{}: {e}", x.display())), fs::read(y).unwrap());
    }
    let reloaded = load_image_folder(&a.path().join("source"), 16).unwrap();
    assert_eq!(reloaded.classes, src.classes);
    assert_eq!(reloaded.len(), 6);
}
