//! Reference values evaluated at 50 significant digits by
//! `scripts/accountant_oracle.py` and frozen here.
#![allow(clippy::excessive_precision)]

/// `(alpha, rdp, delta, epsilon)`.
pub const CONVERSION: [(f64, f64, f64, f64); 50] = [
    (1.5, 0.01, 1e-05, 21.126308425056018385),
    (1.5, 0.01, 1e-09, 39.546989169008383857),
    (1.5, 0.5, 1e-05, 21.616308425056018385),
    (1.5, 0.5, 1e-09, 40.036989169008383857),
    (1.5, 4.0, 1e-05, 25.116308425056018385),
    (1.5, 4.0, 1e-09, 43.536989169008383857),
    (1.5, 57.3, 1e-05, 78.416308425056018385),
    (1.5, 57.3, 1e-09, 96.836989169008383857),
    (1.5, 250.0, 1e-05, 271.11630842505601838),
    (1.5, 250.0, 1e-09, 289.53698916900838386),
    (2.0, 0.01, 1e-05, 10.136631103850337801),
    (2.0, 0.01, 1e-09, 19.346971475826520537),
    (2.0, 0.5, 1e-05, 10.626631103850337801),
    (2.0, 0.5, 1e-09, 19.836971475826520537),
    (2.0, 4.0, 1e-05, 14.126631103850337801),
    (2.0, 4.0, 1e-09, 23.336971475826520537),
    (2.0, 57.3, 1e-05, 67.426631103850337801),
    (2.0, 57.3, 1e-09, 76.636971475826520537),
    (2.0, 250.0, 1e-05, 260.1266311038503378),
    (2.0, 250.0, 1e-09, 269.33697147582652054),
    (3.0, 0.01, 1e-05, 4.8116914800428949824),
    (3.0, 0.01, 1e-09, 9.4168616660309863504),
    (3.0, 0.5, 1e-05, 5.3016914800428949824),
    (3.0, 0.5, 1e-09, 9.9068616660309863504),
    (3.0, 4.0, 1e-05, 8.8016914800428949824),
    (3.0, 4.0, 1e-09, 13.40686166603098635),
    (3.0, 57.3, 1e-05, 62.101691480042894982),
    (3.0, 57.3, 1e-09, 66.70686166603098635),
    (3.0, 250.0, 1e-05, 254.80169148004289498),
    (3.0, 250.0, 1e-09, 259.40686166603098635),
    (8.0, 0.01, 1e-05, 1.2241091678455334471),
    (8.0, 0.01, 1e-09, 2.5398720781278452666),
    (8.0, 0.5, 1e-05, 1.7141091678455334471),
    (8.0, 0.5, 1e-09, 3.0298720781278452666),
    (8.0, 4.0, 1e-05, 5.2141091678455334471),
    (8.0, 4.0, 1e-09, 6.5298720781278452666),
    (8.0, 57.3, 1e-05, 58.514109167845533447),
    (8.0, 57.3, 1e-09, 59.829872078127845267),
    (8.0, 250.0, 1e-05, 251.21410916784553345),
    (8.0, 250.0, 1e-09, 252.52987207812784527),
    (32.0, 0.01, 1e-05, 0.23783806175543588829),
    (32.0, 0.01, 1e-09, 0.53494581569015146043),
    (32.0, 0.5, 1e-05, 0.72783806175543588829),
    (32.0, 0.5, 1e-09, 1.0249458156901514604),
    (32.0, 4.0, 1e-05, 4.2278380617554358883),
    (32.0, 4.0, 1e-09, 4.5249458156901514604),
    (32.0, 57.3, 1e-05, 57.527838061755435888),
    (32.0, 57.3, 1e-09, 57.82494581569015146),
    (32.0, 250.0, 1e-05, 250.22783806175543589),
    (32.0, 250.0, 1e-09, 250.52494581569015146),
];

/// `(sigma, steps, delta, epsilon, best_alpha)` for the default order grid.
pub const LEDGER: [(f64, u64, f64, f64, f64); 6] = [
    (0.8, 1, 1e-05, 6.1589783368198222556, 5.0),
    (0.8, 30, 1e-05, 56.272558425056018385, 1.5),
    (0.8, 300, 1e-05, 372.67880842505601838, 1.5),
    (1.6, 30, 1e-05, 21.845381103850337801, 2.0),
    (3.0, 1000, 1e-05, 104.44964175838935172, 1.5),
    (10.0, 10, 1e-05, 1.308497269027429645, 14.0),
];
