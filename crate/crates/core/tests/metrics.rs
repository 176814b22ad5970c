use ect_core::image::Image;
use ect_core::metrics::{iou, mse, pearson_cc, psnr, ssim, stitch, IOU_THRESHOLD, PSNR_CAP_DB};
use proptest::prelude::*;

fn image(rows: usize, cols: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0..=1.0f64, rows * cols).prop_map(move |d| Image::new(rows, cols, d).unwrap())
}

fn pair() -> impl Strategy<Value = (Image, Image)> {
    (2usize..9, 2usize..9).prop_flat_map(|(r, c)| (image(r, c), image(r, c)))
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_symmetric((a, b) in pair()) {
        let e = mse(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(e, mse(&b, &a).unwrap());

        let cc = pearson_cc(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&cc));
        prop_assert!((cc - pearson_cc(&b, &a).unwrap()).abs() < 1e-12);

        let j = iou(&a, &b, IOU_THRESHOLD).unwrap();
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, iou(&b, &a, IOU_THRESHOLD).unwrap());

        let s = ssim(&a, &b).unwrap();
        prop_assert!(s <= 1.0 + 1e-12);
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);

        let p = psnr(&a, &b, 1.0, PSNR_CAP_DB).unwrap();
        prop_assert!(p >= 0.0 && p <= PSNR_CAP_DB);
    }

    #[test]
    fn identical_images_score_perfectly(a in (2usize..9, 2usize..9).prop_flat_map(|(r, c)| image(r, c))) {
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(psnr(&a, &a, 1.0, PSNR_CAP_DB).unwrap(), PSNR_CAP_DB);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(iou(&a, &a, IOU_THRESHOLD).unwrap(), 1.0);
    }

    #[test]
    fn stitching_without_overlap_concatenates(widths in prop::collection::vec(1usize..6, 1..5), seed in any::<u8>()) {
        let windows: Vec<Image> = widths
            .iter()
            .enumerate()
            .map(|(w, &cols)| {
                let data = (0..3 * cols).map(|k| ((k * 13 + w * 7 + seed as usize) % 17) as f64 / 16.0).collect();
                Image::new(3, cols, data).unwrap()
            })
            .collect();
        let wide = stitch(&windows, 0).unwrap();
        prop_assert_eq!(wide.cols, widths.iter().sum::<usize>());
        for r in 0..3 {
            let row: Vec<f64> = windows.iter().flat_map(|w| (0..w.cols).map(move |c| w.get(r, c))).collect();
            prop_assert_eq!(&wide.data[r * wide.cols..(r + 1) * wide.cols], &row[..]);
        }
    }
}
