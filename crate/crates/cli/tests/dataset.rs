use styleblend::ops::to_f64_vec;
use styleblend_cli::dataset::{load_image, save_png, Dataset};
use styleblend_cli::CliError;

#[test]
fn centre_crop_keeps_middle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.png");
    // 48x16: red, green, blue thirds
    image::RgbImage::from_fn(48, 16, |x, _| match x / 16 {
        0 => image::Rgb([255, 0, 0]),
        1 => image::Rgb([0, 255, 0]),
        _ => image::Rgb([0, 0, 255]),
    })
    .save(&path)
    .unwrap();
    let img = load_image(&path, 16).unwrap();
    let v = to_f64_vec(img.tensor()).unwrap();
    let plane = 16 * 16;
    assert!(v[..plane].iter().all(|&x| x == -1.0));
    assert!(v[plane..2 * plane].iter().all(|&x| x == 1.0));
    assert!(v[2 * plane..].iter().all(|&x| x == -1.0));
}

#[test]
fn loader_is_stable_and_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    image::RgbImage::from_fn(37, 41, |x, y| image::Rgb([(x * 6) as u8, (y * 5) as u8, ((x + y) * 3) as u8]))
        .save(&path)
        .unwrap();
    let a = to_f64_vec(load_image(&path, 16).unwrap().tensor()).unwrap();
    let b = to_f64_vec(load_image(&path, 16).unwrap().tensor()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3 * 16 * 16);
    assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
}

#[test]
fn png_round_trip_is_lossless_at_size() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.png");
    image::RgbImage::from_fn(16, 16, |x, y| image::Rgb([(x * 16) as u8, (y * 16) as u8, 77]))
        .save(&src)
        .unwrap();
    let img = load_image(&src, 16).unwrap();
    let out = dir.path().join("out.png");
    save_png(&img, &out).unwrap();
    assert_eq!(image::open(&src).unwrap().to_rgb8(), image::open(&out).unwrap().to_rgb8());
}

#[test]
fn index_is_sorted_and_png_only() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["b.png", "a.PNG", "c.png"] {
        image::RgbImage::new(4, 4).save_with_format(dir.path().join(name), image::ImageFormat::Png).unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let names: Vec<_> = ds.files.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
    assert_eq!(names, ["a.PNG", "b.png", "c.png"]);
}

#[test]
fn missing_dir_is_data_error() {
    assert!(matches!(Dataset::open("/nonexistent/faces".as_ref()), Err(CliError::Data(_))));
}
