use rdwgd_bench::circle_problem;

#[test]
fn circle_fixture_shapes() {
    let (mu, nu) = circle_problem(500, 7);
    assert_eq!((mu.len(), mu.dim()), (500, 2));
    assert_eq!((nu.len(), nu.dim()), (7, 2));
    assert_eq!(circle_problem(500, 7), (mu, nu));
}
