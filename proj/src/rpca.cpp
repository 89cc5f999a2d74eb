#include "deeppbm/rpca.hpp"

#include <algorithm>
#include <cmath>

#include "deeppbm/error.hpp"

namespace deeppbm {

ObservationMatrix ObservationMatrix::from_frames(const FrameTensor& frames) {
    ObservationMatrix obs;
    obs.channels = frames.channels();
    obs.height = frames.height();
    obs.width = frames.width();
    const auto rows = static_cast<Eigen::Index>(frames.frame_size());
    obs.data.resize(rows, static_cast<Eigen::Index>(frames.frames()));
    for (std::size_t n = 0; n < frames.frames(); ++n) {
        const auto f = frames.frame(n);
        for (Eigen::Index r = 0; r < rows; ++r) obs.data(r, static_cast<Eigen::Index>(n)) = f[static_cast<std::size_t>(r)];
    }
    return obs;
}

FrameTensor ObservationMatrix::to_frames(const Eigen::MatrixXd& m, std::size_t frame_index_offset) const {
    if (static_cast<std::size_t>(m.rows()) != channels * height * width)
        throw ShapeError("matrix rows do not match the frame size");
    std::vector<float> v(static_cast<std::size_t>(m.size()));
    std::size_t k = 0;
    for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r) v[k++] = static_cast<float>(std::clamp(m(r, c), 0.0, 1.0));
    return FrameTensor(static_cast<std::size_t>(m.cols()), channels, height, width, std::move(v), frame_index_offset);
}

Eigen::MatrixXd soft_threshold(const Eigen::MatrixXd& x, double tau) {
    if (tau < 0.0) throw ConfigError("soft threshold must be non-negative");
    return x.unaryExpr([tau](double v) {
        const double mag = std::abs(v) - tau;
        return mag > 0.0 ? std::copysign(mag, v) : 0.0;
    });
}

SvtResult singular_value_threshold(const Eigen::MatrixXd& x, double tau) {
    if (!x.allFinite()) throw NumericError("singular value thresholding of a non-finite matrix");
    if (tau < 0.0) throw ConfigError("singular value threshold must be non-negative");
    if (x.size() == 0) return {x, 0};
    Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd& s = svd.singularValues();
    Eigen::Index keep = 0;
    while (keep < s.size() && s(keep) > tau) ++keep;
    SvtResult out;
    out.rank = static_cast<std::size_t>(keep);
    if (keep == 0) {
        out.matrix = Eigen::MatrixXd::Zero(x.rows(), x.cols());
        return out;
    }
    const Eigen::VectorXd shrunk = (s.head(keep).array() - tau).matrix();
    out.matrix = svd.matrixU().leftCols(keep) * shrunk.asDiagonal() * svd.matrixV().leftCols(keep).transpose();
    return out;
}

double default_lambda(std::size_t rows, std::size_t cols) {
    return 1.0 / std::sqrt(static_cast<double>(std::max(rows, cols)));
}

double nuclear_norm(const Eigen::MatrixXd& m) {
    if (m.size() == 0) return 0.0;
    return Eigen::BDCSVD<Eigen::MatrixXd>(m).singularValues().sum();
}

RpcaResult rpca_decompose(const Eigen::MatrixXd& m, const RpcaOptions& options) {
    if (m.size() == 0) throw ShapeError("RPCA needs a nonempty observation matrix");
    if (!m.allFinite()) throw NumericError("RPCA observation matrix holds non-finite values");
    if (!(options.tol > 0.0)) throw ConfigError("RPCA tolerance must be positive");
    if (options.max_iter < 1) throw ConfigError("RPCA max_iter must be at least 1");
    if (!(options.rho > 1.0)) throw ConfigError("RPCA rho must exceed 1");

    RpcaResult r;
    r.lambda = options.lambda.value_or(default_lambda(static_cast<std::size_t>(m.rows()),
                                                       static_cast<std::size_t>(m.cols())));
    if (!(r.lambda > 0.0)) throw ConfigError("RPCA lambda must be positive");
    r.low_rank = Eigen::MatrixXd::Zero(m.rows(), m.cols());
    r.sparse = Eigen::MatrixXd::Zero(m.rows(), m.cols());

    const double norm_fro = m.norm();
    if (norm_fro == 0.0) {
        r.converged = true;
        return r;
    }
    const double norm_two = Eigen::BDCSVD<Eigen::MatrixXd>(m).singularValues()(0);
    const double norm_inf = m.cwiseAbs().maxCoeff() / r.lambda;
    // Dual variable starts at M / J(M), the standard feasible scaling.
    Eigen::MatrixXd y = m / std::max(norm_two, norm_inf);
    double mu = options.mu.value_or(1.25 / norm_two);
    const double mu_max = mu * options.mu_ceiling_factor;

    for (std::size_t it = 1; it <= options.max_iter; ++it) {
        const double inv_mu = 1.0 / mu;
        SvtResult svt = singular_value_threshold(m - r.sparse + inv_mu * y, inv_mu);
        r.low_rank = std::move(svt.matrix);
        r.rank = svt.rank;
        r.sparse = soft_threshold(m - r.low_rank + inv_mu * y, r.lambda * inv_mu);
        const Eigen::MatrixXd z = m - r.low_rank - r.sparse;
        y += mu * z;
        mu = std::min(mu * options.rho, mu_max);
        r.iterations = it;
        r.residual = z.norm() / norm_fro;
        if (r.residual <= options.tol) {
            r.converged = true;
            break;
        }
    }
    return r;
}

}  // namespace deeppbm
