//! PNG encoding for the images produced by the pipeline.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, RgbImage, RgbaImage};

fn encode<P, C>(img: &image::ImageBuffer<P, C>) -> Vec<u8>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("png encoding into memory cannot fail");
    out.into_inner()
}

pub fn encode_rgba(img: &RgbaImage) -> Vec<u8> {
    encode(img)
}

pub fn encode_rgb(img: &RgbImage) -> Vec<u8> {
    encode(img)
}

pub fn encode_gray(img: &GrayImage) -> Vec<u8> {
    encode(img)
}
