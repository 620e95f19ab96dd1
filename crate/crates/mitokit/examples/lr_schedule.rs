//! Cyclical learning-rate schedule and the early-stopping state machine.
//!
//! ```bash
//! cargo run -p mitokit --example lr_schedule
//! ```

use mitokit::trainctl::{CyclicalLrConfig, EarlyStopState, StopAction};

fn main() {
    // triangular wave between 1e-5 and the 1e-4 peak
    let cfg = CyclicalLrConfig { step_size: 8, ..Default::default() };
    println!("one full cycle (step_size = {}):", cfg.step_size);
    for (it, lr) in cfg.dump(2 * cfg.step_size + 1) {
        let bar = "#".repeat((lr / cfg.max_lr * 40.0).round() as usize);
        println!("  it {it:>2}  lr {lr:.2e}  {bar}");
    }

    // a training run whose validation loss plateaus: patience 10 stops it
    println!("\nearly stopping with patience 10:");
    let mut state = EarlyStopState::new(10);
    let losses = [
        0.90, 0.72, 0.61, 0.55, 0.52, 0.51, 0.515, 0.52, 0.53, 0.51, 0.52, 0.55, 0.54, 0.53,
        0.52, 0.56,
    ];
    for (epoch, &loss) in losses.iter().enumerate() {
        match state.observe(epoch as u64, loss).unwrap() {
            StopAction::SaveCheckpoint => println!("  epoch {epoch:>2} loss {loss:.3}  -> checkpoint"),
            StopAction::Continue => println!(
                "  epoch {epoch:>2} loss {loss:.3}  ({} stale)",
                state.epochs_since_improvement
            ),
            StopAction::Stop => {
                println!("  epoch {epoch:>2} loss {loss:.3}  -> STOP");
                break;
            }
        }
    }
    println!(
        "best loss {:.3} at epoch {}",
        state.best_loss, state.best_epoch
    );
}
