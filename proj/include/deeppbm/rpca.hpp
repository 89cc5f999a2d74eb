#pragma once

#include <cstddef>
#include <optional>

#include <Eigen/Dense>

#include "deeppbm/video_io.hpp"

namespace deeppbm {

/// Frames stacked as columns: [pixels*channels x frames].
struct ObservationMatrix {
    Eigen::MatrixXd data;
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;

    static ObservationMatrix from_frames(const FrameTensor& frames);
    /// Reshapes columns of m back into frames, clamped to [0,1].
    FrameTensor to_frames(const Eigen::MatrixXd& m, std::size_t frame_index_offset = 0) const;
};

/// Elementwise sign(x) * max(|x| - tau, 0).
Eigen::MatrixXd soft_threshold(const Eigen::MatrixXd& x, double tau);

struct SvtResult {
    Eigen::MatrixXd matrix;
    std::size_t rank = 0;
};

/// U * shrink(S, tau) * V^T. Throws NumericError on non-finite input.
SvtResult singular_value_threshold(const Eigen::MatrixXd& x, double tau);

struct RpcaOptions {
    /// Defaults to 1/sqrt(max(rows, cols)).
    std::optional<double> lambda;
    double tol = 1e-7;
    std::size_t max_iter = 500;
    double rho = 1.5;
    /// Defaults to 1.25 / ||M||_2.
    std::optional<double> mu;
    /// Upper bound on mu as a multiple of the initial mu.
    double mu_ceiling_factor = 1e7;
};

struct RpcaResult {
    Eigen::MatrixXd low_rank;
    Eigen::MatrixXd sparse;
    std::size_t iterations = 0;
    double residual = 0.0;  // ||M - L - S||_F / ||M||_F
    bool converged = false;
    double lambda = 0.0;
    std::size_t rank = 0;
};

double default_lambda(std::size_t rows, std::size_t cols);

/// Principal component pursuit, min ||L||_* + lambda ||S||_1 s.t. M = L + S, solved
/// with the inexact augmented Lagrange multiplier method. Hitting max_iter is
/// reported through `converged`, not thrown.
RpcaResult rpca_decompose(const Eigen::MatrixXd& m, const RpcaOptions& options = {});

double nuclear_norm(const Eigen::MatrixXd& m);

}  // namespace deeppbm
