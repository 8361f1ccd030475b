//! `ETGA` head model files: sections `template` (N x 3), `expr_basis`
//! (N x 3 x K), `skin_weights` (N x 2), `jaw_pivot` (3) and `faces`
//! (T x 3 vertex indices, flattened).

use std::path::Path;

use talkhead_core::head::HeadModelAssets;
use talkhead_core::tensor::Tensor;

use crate::etg::{Body, Container, FormatError};
use crate::fsio::{self, IoError};

pub const ASSET_MAGIC: [u8; 4] = *b"ETGA";
pub const ASSET_VERSION: u16 = 1;

pub fn encode_head(head: &HeadModelAssets) -> Vec<u8> {
    let n = head.num_vertices();
    let k = head.num_expr();
    let mut c = Container::new(ASSET_MAGIC, ASSET_VERSION);
    let flat = |rows: &[[f64; 3]]| rows.iter().flatten().copied().collect::<Vec<_>>();
    c.push_tensor("template", &tensor(vec![n, 3], flat(head.template())));
    c.push_tensor("expr_basis", &tensor(vec![n, 3, k], head.expr_basis().to_vec()));
    c.push_tensor(
        "skin_weights",
        &tensor(vec![n, 2], head.skin_weights().iter().flatten().copied().collect()),
    );
    c.push_tensor("jaw_pivot", &tensor(vec![3], head.jaw_pivot().to_vec()));
    c.push(
        "faces",
        Body::Indices(head.faces().iter().flatten().map(|&v| v as u64).collect()),
    );
    c.encode()
}

fn tensor(dims: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(dims, data).expect("validated head model data is finite")
}

/// Decode and validate. `base` is the offset of `bytes` inside a larger
/// file, for error messages.
pub fn decode_head(bytes: &[u8], base: u64) -> Result<HeadModelAssets, FormatError> {
    let c = Container::decode_at(bytes, base, ASSET_MAGIC, ASSET_VERSION)?;
    let template = c.tensor("template")?;
    let n = template.rows();
    let shape = |name: &str, t: &Tensor, want: &[usize]| -> Result<(), FormatError> {
        if t.dims() != want {
            return Err(FormatError {
                offset: c.get(name)?.offset,
                reason: format!("section '{name}' has dims {:?}, expected {want:?}", t.dims()),
            });
        }
        Ok(())
    };
    shape("template", &template, &[n, 3])?;
    let basis = c.tensor("expr_basis")?;
    let k = basis.dims().get(2).copied().unwrap_or(0);
    shape("expr_basis", &basis, &[n, 3, k])?;
    let skin = c.tensor("skin_weights")?;
    shape("skin_weights", &skin, &[n, 2])?;
    let pivot = c.tensor("jaw_pivot")?;
    shape("jaw_pivot", &pivot, &[3])?;
    let faces = c.indices("faces")?;
    if faces.len() % 3 != 0 {
        return Err(FormatError {
            offset: c.get("faces")?.offset,
            reason: format!("faces hold {} indices, not a multiple of 3", faces.len()),
        });
    }
    let faces = faces
        .chunks_exact(3)
        .map(|f| {
            f.iter()
                .map(|&v| usize::try_from(v).unwrap_or(usize::MAX))
                .collect::<Vec<_>>()
        })
        .map(|f| [f[0], f[1], f[2]])
        .collect();
    HeadModelAssets::new(
        template.data().chunks(3).map(|r| [r[0], r[1], r[2]]).collect(),
        basis.data().to_vec(),
        k,
        skin.data().chunks(2).map(|r| [r[0], r[1]]).collect(),
        [pivot.data()[0], pivot.data()[1], pivot.data()[2]],
        faces,
    )
    .map_err(|e| FormatError {
        offset: base,
        reason: format!("invalid head model: {e}"),
    })
}

pub fn save_head(path: &Path, head: &HeadModelAssets) -> Result<(), IoError> {
    fsio::write_atomic(path, &encode_head(head))
}

pub fn load_head(path: &Path) -> Result<HeadModelAssets, IoError> {
    decode_head(&fsio::read(path)?, 0).map_err(|e| IoError::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> HeadModelAssets {
        HeadModelAssets::new(
            vec![[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 1.2]],
            (0..4 * 3 * 2).map(|i| i as f64 * 0.01).collect(),
            2,
            vec![[1.0, 0.0], [0.5, 0.5], [0.0, 1.0], [0.25, 0.75]],
            [0.0, 0.5, 1.5],
            vec![[0, 2, 1], [1, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn head_round_trip() {
        let h = quad();
        let b = encode_head(&h);
        let d = decode_head(&b, 0).unwrap();
        assert_eq!(d, h);
        assert_eq!(encode_head(&d), b);
    }

    #[test]
    fn bad_skin_row_is_named() {
        let h = quad();
        let mut c = Container::decode(&encode_head(&h), ASSET_MAGIC, ASSET_VERSION).unwrap();
        let skin = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.5, 0.5, 0.0, 0.9, 0.25, 0.75]).unwrap();
        let pos = c.sections.iter().position(|s| s.name == "skin_weights").unwrap();
        c.sections[pos].body = Body::Tensor(crate::etg::tensor_bytes(&skin, crate::etg::Dtype::F64));
        let e = decode_head(&c.encode(), 0).unwrap_err();
        assert!(e.reason.contains("vertex 2"), "{e}");
    }
}
