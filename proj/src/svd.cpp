#include "mpo/svd.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace mpo {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

SvdResult pack(const Eigen::MatrixXd& u, const Eigen::VectorXd& s, const Eigen::MatrixXd& v) {
    const int64_t m = u.rows(), k = s.size(), n = v.rows();
    SvdResult out{DenseTensor({m, k}), std::vector<double>(static_cast<size_t>(k)),
                  DenseTensor({n, k})};
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < k; ++j) out.u[i * k + j] = u(i, j);
    for (int64_t j = 0; j < k; ++j) out.singular[static_cast<size_t>(j)] = s(j);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < k; ++j) out.v[i * k + j] = v(i, j);
    return out;
}

}  // namespace

SvdResult svd(const DenseTensor& matrix) {
    const int64_t m = matrix.rows(), n = matrix.cols();
    for (int64_t i = 0; i < matrix.size(); ++i)
        if (!std::isfinite(matrix[i]))
            throw ConvergenceFailure("svd input contains non-finite entries");

    Eigen::Map<const RowMatrix> mapped(matrix.data(), m, n);

    // Jacobi is the accuracy workhorse for small problems; divide-and-conquer
    // keeps the large TT-SVD unfoldings fast.
    if (std::min(m, n) <= 32) {
        Eigen::JacobiSVD<Eigen::MatrixXd> solver(mapped,
                                                 Eigen::ComputeThinU | Eigen::ComputeThinV);
        if (solver.info() != Eigen::Success)
            throw ConvergenceFailure("Jacobi SVD did not converge");
        return pack(solver.matrixU(), solver.singularValues(), solver.matrixV());
    }
    Eigen::BDCSVD<Eigen::MatrixXd> solver(mapped, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (solver.info() != Eigen::Success)
        throw ConvergenceFailure("BDC SVD did not converge");
    return pack(solver.matrixU(), solver.singularValues(), solver.matrixV());
}

}  // namespace mpo
