/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved by more than `threshold` for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        ReduceOnPlateau {
            factor,
            patience,
            threshold,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's loss, returning the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Signals a stop after `patience` consecutive epochs without improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, threshold: f64) -> Self {
        EarlyStopping {
            patience,
            threshold,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, loss: f64) -> bool {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.bad_epochs >= self.patience
    }
}
