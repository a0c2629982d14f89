use ribpy::convert::{nested3, tensor3};

#[test]
fn nested_round_trip() {
    let rows = vec![vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]; 2];
    let t = tensor3(&rows, "x").unwrap();
    assert_eq!(t.dims(), [2, 3, 2]);
    assert_eq!(&t.as_slice()[..4], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(nested3(&t).unwrap(), rows);
}

#[test]
fn ragged_and_empty_inputs_are_rejected() {
    let ragged = vec![vec![vec![1.0, 2.0], vec![3.0]]];
    let err = tensor3(&ragged, "q").unwrap_err().to_string();
    assert!(err.contains("q[0][1]"), "{err}");
    assert!(tensor3(&vec![vec![vec![1.0]], vec![]], "k").is_err());
    assert!(tensor3(&Vec::new(), "v").is_err());
}
