# Services for global point cloud alignment (tessellations, mixtures, branch and bound)
