#pragma once

#include <vector>

namespace optrisk {

// Natural cubic spline through strictly increasing knots. Evaluation outside
// [front, back] throws InterpolationError.
class CubicSpline {
public:
    CubicSpline() = default;
    CubicSpline(std::vector<double> x, std::vector<double> y);

    double operator()(double x) const;
    double derivative(double x) const;
    double second_derivative(double x) const;

    bool contains(double x) const;
    double front() const { return x_.front(); }
    double back() const { return x_.back(); }
    const std::vector<double>& knots() const { return x_; }
    const std::vector<double>& values() const { return y_; }

private:
    std::vector<double> x_;
    std::vector<double> y_;
    std::vector<double> m_;  // second derivatives at knots

    std::size_t segment(double x) const;
};

}  // namespace optrisk
