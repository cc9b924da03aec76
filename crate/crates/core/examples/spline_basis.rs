//! Print the cubic B-spline basis on the year grid and a constrained trend.
//!
//! cargo run --example spline_basis [start] [end]

use ipsb::splines::build_basis;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let start: i32 = args.next().map_or(Ok(2000), |s| s.parse())?;
    let end: i32 = args.next().map_or(Ok(2021), |s| s.parse())?;
    let basis = build_basis(start, end)?;
    println!("{} basis functions, {} free coefficients", basis.h, basis.free_len());
    println!("knots {:?}", basis.knots);

    for year in start..=end {
        let row: Vec<String> = basis.b_row(year).iter().map(|b| format!("{b:.3}")).collect();
        println!("{year} {}", row.join(" "));
    }

    // a trend whose increments alternate in sign
    let free: Vec<f64> = (0..basis.free_len()).map(|k| if k % 2 == 0 { 0.1 } else { -0.05 }).collect();
    let alpha = basis.constrain(&free)?;
    println!("\ncoefficients sum to {:.2e}", alpha.iter().sum::<f64>());
    for year in (start..=end).step_by(3) {
        println!("{year} {:+.4}", basis.eval_trend(&free, year as f64)?);
    }
    Ok(())
}
