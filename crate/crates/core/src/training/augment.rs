use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mirror a `C×H×W` tensor along its width.
pub fn flip_width(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3("hflip")?;
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for row in 0..c * h {
        out.extend(src[row * w..(row + 1) * w].iter().rev());
    }
    Tensor::new(&[c, h, w], out)
}

/// Mirror an image and its mask together.
pub fn hflip(image: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
    if image.rank() != 3 || mask.rank() != 3 || image.shape()[1..] != mask.shape()[1..] {
        return Err(Error::shape(
            "hflip",
            format!("image {:?} and mask {:?} differ spatially", image.shape(), mask.shape()),
        ));
    }
    Ok((flip_width(image)?, flip_width(mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirrors_rows() {
        let img = Tensor::new(&[1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let (f, _) = hflip(&img, &img).unwrap();
        assert_eq!(f.data(), &[3., 2., 1., 6., 5., 4.]);
    }
}
