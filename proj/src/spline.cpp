#include "optrisk/spline.hpp"

#include "optrisk/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace optrisk {

namespace {

constexpr double knot_slack = 1e-12;

}  // namespace

CubicSpline::CubicSpline(std::vector<double> x, std::vector<double> y) : x_(std::move(x)), y_(std::move(y)) {
    const std::size_t n = x_.size();
    if (n < 2 || y_.size() != n) {
        throw InterpolationError("spline: need at least two knots with matching values");
    }
    for (std::size_t i = 1; i < n; ++i) {
        if (!(x_[i] > x_[i - 1])) {
            throw InterpolationError("spline: knots must be strictly increasing");
        }
    }
    m_.assign(n, 0.0);
    if (n == 2) {
        return;
    }
    // Tridiagonal system for interior second derivatives (Thomas algorithm).
    std::vector<double> diag(n, 0.0), upper(n, 0.0), rhs(n, 0.0);
    for (std::size_t i = 1; i + 1 < n; ++i) {
        double h0 = x_[i] - x_[i - 1];
        double h1 = x_[i + 1] - x_[i];
        diag[i] = 2.0 * (h0 + h1);
        upper[i] = h1;
        rhs[i] = 6.0 * ((y_[i + 1] - y_[i]) / h1 - (y_[i] - y_[i - 1]) / h0);
    }
    for (std::size_t i = 2; i + 1 < n; ++i) {
        double lower = x_[i] - x_[i - 1];
        double w = lower / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    for (std::size_t i = n - 2; i >= 1; --i) {
        m_[i] = (rhs[i] - upper[i] * m_[i + 1]) / diag[i];
    }
}

bool CubicSpline::contains(double x) const {
    double slack = knot_slack * std::max(1.0, std::abs(x_.back() - x_.front()));
    return x >= x_.front() - slack && x <= x_.back() + slack;
}

std::size_t CubicSpline::segment(double x) const {
    if (x_.empty()) {
        throw InterpolationError("spline: evaluating an empty spline");
    }
    if (!contains(x)) {
        throw InterpolationError("spline: x=" + std::to_string(x) + " outside [" + std::to_string(x_.front()) +
                                 ", " + std::to_string(x_.back()) + "]");
    }
    auto it = std::upper_bound(x_.begin(), x_.end(), x);
    std::size_t i = it == x_.begin() ? 0 : static_cast<std::size_t>(it - x_.begin()) - 1;
    return std::min(i, x_.size() - 2);
}

double CubicSpline::operator()(double x) const {
    std::size_t i = segment(x);
    double h = x_[i + 1] - x_[i];
    double a = (x_[i + 1] - x) / h;
    double b = (x - x_[i]) / h;
    return a * y_[i] + b * y_[i + 1] + ((a * a * a - a) * m_[i] + (b * b * b - b) * m_[i + 1]) * h * h / 6.0;
}

double CubicSpline::derivative(double x) const {
    std::size_t i = segment(x);
    double h = x_[i + 1] - x_[i];
    double a = (x_[i + 1] - x) / h;
    double b = (x - x_[i]) / h;
    return (y_[i + 1] - y_[i]) / h - (3.0 * a * a - 1.0) * h * m_[i] / 6.0 + (3.0 * b * b - 1.0) * h * m_[i + 1] / 6.0;
}

double CubicSpline::second_derivative(double x) const {
    std::size_t i = segment(x);
    double h = x_[i + 1] - x_[i];
    double a = (x_[i + 1] - x) / h;
    double b = (x - x_[i]) / h;
    return a * m_[i] + b * m_[i + 1];
}

}  // namespace optrisk
