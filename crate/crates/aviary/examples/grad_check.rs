//! Verify the Q-network gradients against central finite differences in
//! 64-bit mode, plus a deliberately corrupted negative control.
//!
//!     cargo run --release --example grad_check

fn main() {
    println!("checking 300 random parameter coordinates (f64, h = 1e-5) ...");
    let err = aviary::dqn::verify_gradients(11, 300, 1.0);
    println!("max relative error: {err:.3e}  (pass threshold 1e-4)");

    println!("negative control: conv1 weight gradients scaled by 1.05 ...");
    let corrupted = aviary::dqn::verify_gradients(11, 600, 1.05);
    println!("max relative error: {corrupted:.3e}  (must exceed 1e-2)");

    if err <= 1e-4 && corrupted > 1e-2 {
        println!("gradients verified");
    } else {
        eprintln!("gradient verification FAILED");
        std::process::exit(1);
    }
}
