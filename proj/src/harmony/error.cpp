#include "harmony/error.hpp"

namespace harmony {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Config: return "configuration error";
        case ErrorKind::Dimension: return "dimension error";
        case ErrorKind::Numeric: return "numeric error";
        case ErrorKind::Precondition: return "precondition error";
        case ErrorKind::Selection: return "selection error";
        case ErrorKind::Parse: return "parse error";
        case ErrorKind::Schema: return "schema error";
        case ErrorKind::Io: return "I/O error";
        case ErrorKind::Version: return "version error";
    }
    return "error";
}

}  // namespace harmony
