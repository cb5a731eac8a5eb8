use std::path::Path;

/// RGB per class: background, road, vehicle.
pub const CLASS_COLORS: [[u8; 3]; 3] = [[0, 0, 0], [128, 128, 128], [255, 0, 0]];

/// Binary PPM with ground truth on the left and prediction on the right.
/// Masks are `(nx, ny)` with rows along ego x; the image puts forward at the
/// top and ego-left on the left, so it is `2·ny` wide and `nx` tall.
pub fn mask_pixmap(pred: &[u8], gt: &[u8], nx: usize, ny: usize) -> Vec<u8> {
    assert!(
        pred.len() == nx * ny && gt.len() == nx * ny,
        "contract violation: masks of {} and {} cells for a {nx}×{ny} grid",
        pred.len(),
        gt.len()
    );
    let mut out = format!("P6\n{} {}\n255\n", 2 * ny, nx).into_bytes();
    for r in 0..nx {
        let i = nx - 1 - r;
        for mask in [gt, pred] {
            for c in 0..ny {
                let j = ny - 1 - c;
                let class = mask[i * ny + j] as usize;
                out.extend_from_slice(&CLASS_COLORS[class.min(2)]);
            }
        }
    }
    out
}

pub fn export_mask_image(pred: &[u8], gt: &[u8], nx: usize, ny: usize, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, mask_pixmap(pred, gt, nx, ny))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_size() {
        let (nx, ny) = (4, 6);
        let img = mask_pixmap(&vec![1; nx * ny], &vec![0; nx * ny], nx, ny);
        let header = b"P6\n12 4\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 3 * 12 * 4);
        // first row: six black ground-truth pixels then six gray predictions
        assert_eq!(&img[header.len()..header.len() + 3], &[0, 0, 0]);
        assert_eq!(&img[header.len() + 18..header.len() + 21], &[128, 128, 128]);
    }

    #[test]
    fn forward_row_is_on_top() {
        let (nx, ny) = (2, 2);
        let mut gt = vec![0; 4];
        gt[ny] = 2; // row i = 1 (ahead), column j = 0 (rightmost)
        let img = mask_pixmap(&gt, &gt, nx, ny);
        let body = &img[b"P6\n4 2\n255\n".len()..];
        assert_eq!(&body[3..6], &[255, 0, 0]);
        assert_eq!(&body[..3], &[0, 0, 0]);
    }

    #[test]
    fn re_export_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
        let pred: Vec<u8> = (0..48).map(|i| (i % 3) as u8).collect();
        let gt: Vec<u8> = (0..48).map(|i| (i / 16) as u8).collect();
        export_mask_image(&pred, &gt, 6, 8, &a).unwrap();
        export_mask_image(&pred, &gt, 6, 8, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_mask_image(&[0], &[0], 1, 1, &dir.path().join("missing/x.ppm")).is_err());
    }
}
