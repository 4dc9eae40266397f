use jova_tensor::{ArrayData, Checkpoint, CheckpointError, DType, NamedArray, Tensor};
use proptest::prelude::*;

fn array_strategy() -> impl Strategy<Value = (Vec<usize>, ArrayData)> {
    let shape = proptest::collection::vec(0usize..4, 0..4);
    (shape, 0u8..3).prop_flat_map(|(shape, code)| {
        let n: usize = shape.iter().product();
        let data = match code {
            0 => proptest::collection::vec(any::<f64>(), n)
                .prop_map(ArrayData::F64)
                .boxed(),
            1 => proptest::collection::vec(any::<f32>(), n)
                .prop_map(ArrayData::F32)
                .boxed(),
            _ => proptest::collection::vec(any::<u8>(), n)
                .prop_map(ArrayData::U8)
                .boxed(),
        };
        (Just(shape), data)
    })
}

/// Compares payloads bitwise so NaN entries round-trip too.
fn same_bits(a: &ArrayData, b: &ArrayData) -> bool {
    match (a, b) {
        (ArrayData::F64(x), ArrayData::F64(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        (ArrayData::F32(x), ArrayData::F32(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        (ArrayData::U8(x), ArrayData::U8(y)) => x == y,
        _ => false,
    }
}

proptest! {
    #[test]
    fn round_trip_is_bit_exact(
        arrays in proptest::collection::vec(array_strategy(), 0..6),
        names in proptest::collection::hash_set("[a-z_./]{1,12}", 6),
    ) {
        let mut ckpt = Checkpoint::new();
        for ((shape, data), name) in arrays.into_iter().zip(names) {
            ckpt.push(NamedArray { name, shape, data }).unwrap();
        }
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert_eq!(back.arrays().len(), ckpt.arrays().len());
        for (a, b) in ckpt.arrays().iter().zip(back.arrays()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.shape, &b.shape);
            prop_assert!(same_bits(&a.data, &b.data));
        }
    }
}

#[test]
fn tensors_keep_their_precision() {
    let t64 = Tensor::from_fn([2, 3], |i| i as f64 / 7.0);
    let t32 = t64.clone().with_dtype(DType::F32);
    let mut ckpt = Checkpoint::new();
    ckpt.push_tensor("a", &t64).unwrap();
    ckpt.push_tensor("b", &t32).unwrap();
    ckpt.push_text("meta", "hash=abc").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.jova");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.require("a").unwrap().to_tensor(), t64);
    let b = back.require("b").unwrap().to_tensor();
    assert_eq!(b.dtype(), DType::F32);
    assert_eq!(b.data(), t32.data());
    assert_eq!(back.text("meta").unwrap(), "hash=abc");
    assert!(matches!(back.require("c"), Err(CheckpointError::Missing(_))));
}

#[test]
fn wrong_endianness_marker_is_rejected() {
    let mut bytes = Checkpoint::new().to_bytes();
    bytes.swap(5, 6);
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(CheckpointError::BadEndianness(0xFFFE))
    ));
}

#[test]
fn unknown_dtype_code_is_rejected() {
    let mut ckpt = Checkpoint::new();
    ckpt.push(NamedArray::bytes("x", vec![1], vec![7])).unwrap();
    let mut bytes = ckpt.to_bytes();
    bytes[16] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(CheckpointError::UnknownDtype(9))
    ));
}
