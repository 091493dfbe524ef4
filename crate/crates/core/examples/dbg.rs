use basketbound::oracle::random_consistent_market;
fn main() {
    let (market, _measure) = random_consistent_market(3, 2, 2, &[2.0, 1.5], 41);
    println!("{market:#?}");
    for v in market.validate() { println!("violation: {v}"); }
}
