#pragma once

#include <stdexcept>
#include <string>

namespace optrisk {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define OPTRISK_ERROR(name)                  \
    class name : public Error {              \
    public:                                  \
        using Error::Error;                  \
    }

OPTRISK_ERROR(DomainError);
OPTRISK_ERROR(EstimationError);
OPTRISK_ERROR(InterpolationError);
OPTRISK_ERROR(ConstraintError);
OPTRISK_ERROR(RepairError);
OPTRISK_ERROR(NumericError);
OPTRISK_ERROR(DecompositionError);
OPTRISK_ERROR(MetricError);
OPTRISK_ERROR(TrainingError);
OPTRISK_ERROR(CalibrationError);
OPTRISK_ERROR(RevaluationError);
OPTRISK_ERROR(CatalogError);
OPTRISK_ERROR(UsageError);
OPTRISK_ERROR(InversionError);
OPTRISK_ERROR(ResidualError);

#undef OPTRISK_ERROR

}  // namespace optrisk
