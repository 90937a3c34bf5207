//! 8-bit grayscale raster used for gel frames, plus binary PGM (P5) I/O.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("pixel buffer has {got} bytes, expected {expected} for {width}x{height}")]
    BadLength {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("not a binary PGM: {0}")]
    BadPgm(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major grayscale image. 0 is a dark dot core, 255 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GelImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GelImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::BadLength {
                width,
                height,
                expected: width * height,
                got: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn write_pgm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.pixels)
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = io::BufWriter::new(file);
        self.write_pgm(&mut out)?;
        out.flush()
    }

    pub fn read_pgm<R: Read>(input: R) -> Result<Self, ImageError> {
        let mut reader = BufReader::new(input);
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(ImageError::BadPgm("truncated header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P5" {
            return Err(ImageError::BadPgm(format!("magic {:?}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| ImageError::BadPgm(format!("bad header field {s:?}")))
        };
        let width = parse(&fields[1])?;
        let height = parse(&fields[2])?;
        if parse(&fields[3])? != 255 {
            return Err(ImageError::BadPgm("only maxval 255 is supported".into()));
        }
        let mut pixels = vec![0u8; width * height];
        reader.read_exact(&mut pixels)?;
        Self::new(width, height, pixels)
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        Self::read_pgm(std::fs::File::open(path)?)
    }
}
