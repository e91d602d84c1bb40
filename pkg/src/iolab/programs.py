"""DSL sources for the kernels used throughout the test-suite and CLI demos."""

# In-place LU without pivoting. A[i,k] in S1 is the only reader of that
# element version, hence the out-degree-one annotation.
LU = """\
param N
loop k in 0..N {
  loop i in k+1..N {
    S1: A[i,k] = f(A[i,k], A[k,k]) @outdeg1(A)
  }
  loop i in k+1..N {
    loop j in k+1..N {
      S2: A[i,j] = f(A[i,j], A[i,k], A[k,j])
    }
  }
}
"""

# Two products sharing the input matrix B.
SHARED_INPUT = """\
param N
loop i in 0..N {
  loop j in 0..N {
    loop k in 0..N {
      S: D[i,j,k] = f(A[i,k], B[k,j])
      T: E[i,j,k] = f(C[i,k], B[k,j])
    }
  }
}
"""

# A is generated without loads, then consumed by a matrix product.
ON_THE_FLY = """\
param N
loop i in 0..N {
  loop j in 0..N {
    S: A[i,j] = f()
    loop k in 0..N {
      T: C[i,j] = f(A[i,k], B[k,j], C[i,j])
    }
  }
}
"""

# Same product as ON_THE_FLY with A a plain input.
MATMUL = """\
param N
loop i in 0..N {
  loop j in 0..N {
    loop k in 0..N {
      T: C[i,j] = f(A[i,k], B[k,j], C[i,j])
    }
  }
}
"""

MATRIX_ROW_VECTOR = """\
param N
loop i in 0..N {
  loop j in 0..N {
    S: C[i,j] = f(A[i,j], b[j])
  }
}
"""

ELEMENTWISE = """\
param N
loop i in 0..N {
  S: c[i] = f(a[i], b[i])
}
"""

STREAM = """\
param N
loop i in 0..N {
  S: c[i] = f(a[i])
}
"""

# Violates the disjoint access property: i may equal k.
LU_OVERLAP = """\
param N
loop k in 0..N {
  loop i in k..N {
    loop j in k+1..N {
      S: A[i,j] = f(A[i,j], A[i,k], A[k,j])
    }
  }
}
"""

MATVEC = """\
param N
loop i in 0..N {
  loop j in 0..N {
    S: y[i] = f(y[i], A[i,j], x[j])
  }
}
"""

REDUCTION = """\
param N
loop z in 0..1 {
  loop k in 0..N {
    S: s[z] = f(s[z], a[k])
  }
}
"""

OUTER_PRODUCT = """\
param N
loop i in 0..N {
  loop j in 0..N {
    S: C[i,j] = f(a[i], b[j])
  }
}
"""

ALL = {
    "lu": LU,
    "shared_input": SHARED_INPUT,
    "on_the_fly": ON_THE_FLY,
    "matmul": MATMUL,
    "matrix_row_vector": MATRIX_ROW_VECTOR,
    "elementwise": ELEMENTWISE,
    "stream": STREAM,
    "matvec": MATVEC,
    "reduction": REDUCTION,
    "outer_product": OUTER_PRODUCT,
}
